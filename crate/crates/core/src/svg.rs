//! Minimal self-contained SVG line charts.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    /// One value per round, round 1 first.
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        Series {
            label: label.into(),
            values,
        }
    }
}

/// Plot geometry. Point `i` of a series (round `i + 1`) maps to pixel coordinates by [`ChartLayout::map`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChartLayout {
    pub width: f64,
    pub height: f64,
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Longest series length.
    pub points: usize,
}

impl ChartLayout {
    pub fn accuracy(points: usize) -> Self {
        ChartLayout {
            width: 720.0,
            height: 420.0,
            left: 60.0,
            right: 170.0,
            top: 30.0,
            bottom: 50.0,
            y_min: 0.0,
            y_max: 1.0,
            points,
        }
    }

    pub fn plot_width(&self) -> f64 {
        self.width - self.left - self.right
    }

    pub fn plot_height(&self) -> f64 {
        self.height - self.top - self.bottom
    }

    pub fn map(&self, index: usize, value: f64) -> (f64, f64) {
        let x = if self.points <= 1 {
            self.left + self.plot_width() / 2.0
        } else {
            self.left + self.plot_width() * index as f64 / (self.points - 1) as f64
        };
        let t = ((value - self.y_min) / (self.y_max - self.y_min)).clamp(0.0, 1.0);
        let y = self.top + (1.0 - t) * self.plot_height();
        (x, y)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn x_ticks(points: usize) -> Vec<usize> {
    if points <= 1 {
        return vec![0];
    }
    let span = points - 1;
    let step = [1usize, 2, 5, 10, 20, 25, 50, 100, 200, 250, 500, 1000]
        .into_iter()
        .find(|s| span / s <= 8)
        .unwrap_or(span.div_ceil(8).max(1));
    (1..=points).filter(|&r| r == 1 || r % step == 0).map(|r| r - 1).collect()
}

/// Accuracy-vs-round chart with one polyline per series and a legend.
pub fn emit_svg(series: &[Series], title: &str) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.values.is_empty()) {
        return Err(Error::Contract("chart needs at least one non-empty series".into()));
    }
    let points = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let layout = ChartLayout::accuracy(points);
    let mut out = String::new();
    let (w, h) = (layout.width, layout.height);
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .ok();
    writeln!(out, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#).ok();
    writeln!(
        out,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        layout.left + layout.plot_width() / 2.0,
        escape(title)
    )
    .ok();

    let (x0, y0) = (layout.left, layout.top + layout.plot_height());
    let x1 = layout.left + layout.plot_width();
    writeln!(
        out,
        r#"<g stroke="black" stroke-width="1"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{}" x2="{x0}" y2="{y0}"/></g>"#,
        layout.top
    )
    .ok();

    for k in 0..=5 {
        let v = layout.y_min + (layout.y_max - layout.y_min) * k as f64 / 5.0;
        let (_, y) = layout.map(0, v);
        writeln!(
            out,
            r##"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/><line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#dddddd"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"##,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0
        )
        .ok();
    }
    for i in x_ticks(points) {
        let (x, _) = layout.map(i, layout.y_min);
        writeln!(
            out,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black"/><text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            y0 + 5.0,
            y0 + 18.0,
            i + 1
        )
        .ok();
    }
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">round</text>"#,
        layout.left + layout.plot_width() / 2.0,
        h - 10.0
    )
    .ok();
    writeln!(
        out,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">test accuracy</text>"#,
        layout.top + layout.plot_height() / 2.0,
        layout.top + layout.plot_height() / 2.0
    )
    .ok();

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (x, y) = layout.map(i, if v.is_finite() { v } else { layout.y_min });
                format!("{x:.2},{y:.2}")
            })
            .collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        )
        .ok();
        let ly = layout.top + 10.0 + 18.0 * k as f64;
        let lx = x1 + 15.0;
        writeln!(
            out,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        )
        .ok();
    }
    out.push_str("</svg>\n");
    Ok(out)
}
