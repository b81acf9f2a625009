//! Single runs, sweeps and their on-disk artefacts.
//!
//! A run writes `<out>/<run_id>/{metrics.csv, layers.csv, config.json, curves.svg}`
//! where `run_id` is derived from the configuration, so identical
//! configurations land in the same directory with identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentConfig, Invocation, SweepAxis};
use crate::data::{self, Dataset};
use crate::diagnostics::RoundMetrics;
use crate::error::{Error, Result};
use crate::federation::{self, AboKind};
use crate::svg::{emit_svg, Series};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAYERS_FILE: &str = "layers.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CURVES_FILE: &str = "curves.svg";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const OVERLAY_FILE: &str = "overlay.svg";

fn short_hash(bytes: &[u8]) -> String {
    data::sha256_hex(bytes)[..12].to_string()
}

/// Content-derived identifier of a configuration. Paths and the
/// parallelism switch do not change results, so they are left out.
pub fn run_id(config: &ExperimentConfig) -> String {
    let mut key = config.clone();
    key.data_dir = Default::default();
    key.out_dir = Default::default();
    key.parallel = false;
    let json = serde_json::to_vec(&key).expect("config serialises");
    format!("{}-d{}-e{}-{}", config.abo, config.delta, config.local_epochs, short_hash(&json))
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub run_id: String,
    pub dir: PathBuf,
    pub metrics: Vec<RoundMetrics>,
}

impl RunOutput {
    pub fn best_accuracy(&self) -> f64 {
        best_accuracy(&self.metrics)
    }
}

/// Highest test accuracy reached in any round.
pub fn best_accuracy(metrics: &[RoundMetrics]) -> f64 {
    metrics.iter().map(|m| m.test_accuracy).fold(f64::NEG_INFINITY, f64::max)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(RoundMetrics::CSV_HEADER)?;
    for m in metrics {
        w.write_record(m.csv_record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_layers_csv(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record([
        "round",
        "layer",
        "weak_residual",
        "strong_residual_P",
        "strong_residual_Q",
        "broadcast_error",
        "G_hat",
        "C_A_hat",
        "C_B_hat",
    ])?;
    for m in metrics {
        for (l, lm) in m.layers.iter().enumerate() {
            let mut rec = vec![m.round.to_string(), l.to_string()];
            rec.extend(
                [
                    lm.weak_residual,
                    lm.strong_residual_p,
                    lm.strong_residual_q,
                    lm.broadcast_error,
                    lm.constants.g,
                    lm.constants.c_a,
                    lm.constants.c_b,
                ]
                .iter()
                .map(|v| format!("{v:e}")),
            );
            w.write_record(rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    run_id: &'a str,
    argv: Vec<String>,
    config: &'a ExperimentConfig,
    rounds: usize,
    best_accuracy: f64,
    /// Corollary constants of the last round, both forms of Q².
    final_theoretical: Option<FinalTheory>,
}

#[derive(Serialize)]
struct FinalTheory {
    r2_weak: f64,
    p2: f64,
    q2: f64,
    q2_proof: f64,
    r2_strong: f64,
}

fn series_label(config: &ExperimentConfig) -> String {
    format!("{} δ={} E={}", config.abo, config.delta, config.local_epochs)
}

/// Writes all artefacts of a finished run.
pub fn write_run(config: &ExperimentConfig, metrics: Vec<RoundMetrics>) -> Result<RunOutput> {
    let id = run_id(config);
    let dir = config.out_dir.join(&id);
    create_dir(&dir)?;
    write_metrics_csv(&dir.join(METRICS_FILE), &metrics)?;
    write_layers_csv(&dir.join(LAYERS_FILE), &metrics)?;
    let record = RunRecord {
        run_id: &id,
        argv: config.render(),
        config,
        rounds: metrics.len(),
        best_accuracy: best_accuracy(&metrics),
        final_theoretical: metrics.last().map(|m| FinalTheory {
            r2_weak: m.theoretical_r2_weak,
            p2: m.theoretical_p2,
            q2: m.theoretical_q2,
            q2_proof: m.theoretical_q2_proof,
            r2_strong: m.theoretical_r2_strong,
        }),
    };
    let mut json = serde_json::to_string_pretty(&record)?;
    json.push('\n');
    write_file(&dir.join(CONFIG_FILE), json)?;
    let acc: Vec<f64> = metrics.iter().map(|m| m.test_accuracy).collect();
    if !acc.is_empty() {
        let svg = emit_svg(&[Series::new(series_label(config), acc)], &id)?;
        write_file(&dir.join(CURVES_FILE), svg)?;
    }
    Ok(RunOutput {
        run_id: id,
        dir,
        metrics,
    })
}

/// Runs one experiment and writes its artefacts.
pub fn run(config: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    let metrics = federation::run_experiment(config, train, test)?;
    write_run(config, metrics)
}

#[derive(Clone, Debug)]
pub struct CellSummary {
    pub abo: AboKind,
    pub delta: f64,
    pub local_epochs: usize,
    pub rounds: usize,
    pub best_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub run_dir: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub dir: PathBuf,
    pub cells: Vec<CellSummary>,
}

impl SweepSummary {
    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.error.is_some())
    }

    pub fn cell(&self, abo: AboKind, delta: f64, local_epochs: usize) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.abo == abo && c.delta == delta && c.local_epochs == local_epochs)
    }
}

/// Cell configurations of a sweep, in output order.
pub fn sweep_cells(base: &ExperimentConfig, axis: &SweepAxis, abo_pinned: bool) -> Vec<ExperimentConfig> {
    let abos: Vec<AboKind> = if abo_pinned { vec![base.abo] } else { AboKind::ALL.to_vec() };
    let mut cells = Vec::new();
    let values: Vec<Box<dyn Fn(&mut ExperimentConfig)>> = match axis {
        SweepAxis::Delta(v) => v
            .iter()
            .map(|&d| Box::new(move |c: &mut ExperimentConfig| c.delta = d) as Box<dyn Fn(&mut ExperimentConfig)>)
            .collect(),
        SweepAxis::Epochs(v) => v
            .iter()
            .map(|&e| Box::new(move |c: &mut ExperimentConfig| c.local_epochs = e) as Box<dyn Fn(&mut ExperimentConfig)>)
            .collect(),
    };
    for &abo in &abos {
        for set in &values {
            let mut c = base.clone();
            c.abo = abo;
            set(&mut c);
            cells.push(c);
        }
    }
    cells
}

/// Runs every cell (both operators unless pinned) and writes `summary.csv`
/// plus an overlay chart. Failed cells are recorded, not fatal.
pub fn sweep(
    base: &ExperimentConfig,
    axis: &SweepAxis,
    abo_pinned: bool,
    jobs: usize,
    train: &Dataset,
    test: &Dataset,
) -> Result<SweepSummary> {
    if axis.is_empty() {
        return Err(Error::Config("sweep axis is empty".into()));
    }
    let mut key = serde_json::to_vec(base)?;
    key.extend(format!("{axis:?}{abo_pinned}").bytes());
    let dir = base.out_dir.join(format!("sweep-{}-{}", axis.name(), short_hash(&key)));
    create_dir(&dir)?;

    let mut cells = sweep_cells(base, axis, abo_pinned);
    for c in &mut cells {
        c.out_dir = dir.clone();
        if jobs > 1 {
            c.parallel = false;
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<(ExperimentConfig, Result<RunOutput>)> = pool.install(|| {
        use rayon::prelude::*;
        cells.into_par_iter().map(|c| {
            let r = run(&c, train, test);
            (c, r)
        })
        .collect()
    });

    let mut summaries = Vec::with_capacity(results.len());
    let mut series = Vec::new();
    for (c, r) in results {
        let rounds = c.round_count().unwrap_or(0);
        match r {
            Ok(out) => {
                series.push(Series::new(
                    series_label(&c),
                    out.metrics.iter().map(|m| m.test_accuracy).collect(),
                ));
                summaries.push(CellSummary {
                    abo: c.abo,
                    delta: c.delta,
                    local_epochs: c.local_epochs,
                    rounds,
                    best_accuracy: Some(out.best_accuracy()),
                    final_accuracy: out.metrics.last().map(|m| m.test_accuracy),
                    run_dir: Some(out.dir),
                    error: None,
                });
            }
            Err(e) => {
                log::error!("sweep cell {} failed: {e}", series_label(&c));
                summaries.push(CellSummary {
                    abo: c.abo,
                    delta: c.delta,
                    local_epochs: c.local_epochs,
                    rounds,
                    best_accuracy: None,
                    final_accuracy: None,
                    run_dir: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let summary = SweepSummary { dir, cells: summaries };
    write_summary_csv(&summary.dir.join(SUMMARY_FILE), &summary)?;
    if !series.is_empty() {
        let svg = emit_svg(&series, &format!("{} sweep", axis.name()))?;
        write_file(&summary.dir.join(OVERLAY_FILE), svg)?;
    }
    Ok(summary)
}

fn write_summary_csv(path: &Path, summary: &SweepSummary) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["abo", "delta", "epochs", "rounds", "best_accuracy", "final_accuracy", "status", "run_dir"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for c in &summary.cells {
        w.write_record([
            c.abo.to_string(),
            c.delta.to_string(),
            c.local_epochs.to_string(),
            c.rounds.to_string(),
            opt(c.best_accuracy),
            opt(c.final_accuracy),
            c.error.clone().map(|e| format!("failed: {e}")).unwrap_or_else(|| "ok".into()),
            c.run_dir
                .as_ref()
                .and_then(|d| d.file_name())
                .map(|d| d.to_string_lossy().into_owned())
                .unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Artefacts produced by [`execute`].
#[derive(Debug)]
pub enum Outcome {
    Run(RunOutput),
    Sweep(SweepSummary),
}

/// Loads data (fetching first if asked) and carries out the invocation.
pub fn execute(inv: &Invocation) -> Result<Outcome> {
    let dir = &inv.config.data_dir;
    if inv.fetch {
        data::fetch_mnist(&inv.mirror, dir)?;
    }
    let (train, test) = data::load_mnist(dir)?;
    match &inv.sweep {
        None => run(&inv.config, &train, &test).map(Outcome::Run),
        Some(axis) => sweep(&inv.config, axis, inv.abo_pinned, inv.jobs, &train, &test).map(Outcome::Sweep),
    }
}
