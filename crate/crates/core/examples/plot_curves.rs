//! Overlays the accuracy columns of existing `metrics.csv` files.
//!
//! `cargo run --example plot_curves -- out.svg runs/*/metrics.csv`

use std::fs;

use fedlora::svg::{emit_svg, Series};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().ok_or("usage: plot_curves OUT.svg METRICS.csv...")?;
    let mut series = Vec::new();
    for path in args {
        let mut reader = csv::Reader::from_path(&path)?;
        let col = reader
            .headers()?
            .iter()
            .position(|h| h == "test_accuracy")
            .ok_or("no test_accuracy column")?;
        let values = reader
            .records()
            .map(|r| Ok(r?[col].parse::<f64>()?))
            .collect::<Result<Vec<_>, Box<dyn std::error::Error>>>()?;
        let label = std::path::Path::new(&path)
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or(path.clone());
        series.push(Series::new(label, values));
    }
    fs::write(&out, emit_svg(&series, "test accuracy")?)?;
    println!("wrote {out} with {} series", series.len());
    Ok(())
}
