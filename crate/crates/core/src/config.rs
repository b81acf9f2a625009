//! Experiment configuration and command-line parsing.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{AboKind, LocalSchedule};

pub const DATA_DIR_ENV: &str = "FEDLORA_DATA_DIR";
pub const DEFAULT_ROUNDS: usize = 80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LocalUnit {
    /// `--epochs` counts passes over the client shard.
    Epochs,
    /// `--epochs` counts single SGD steps.
    Steps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub abo: AboKind,
    pub delta: f64,
    pub clients: usize,
    pub rounds: Option<usize>,
    pub total_steps: Option<usize>,
    pub local_epochs: usize,
    pub local_unit: LocalUnit,
    pub eta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Keep at most this many training samples per client.
    pub per_client_cap: Option<usize>,
    /// Evaluate test accuracy on the first N test samples only.
    pub test_limit: Option<usize>,
    pub grad_metrics: bool,
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            abo: AboKind::Sp,
            delta: 1.0,
            clients: 10,
            rounds: Some(DEFAULT_ROUNDS),
            total_steps: None,
            local_epochs: 5,
            local_unit: LocalUnit::Epochs,
            eta: 0.1,
            batch_size: 64,
            seed: 0,
            data_dir: default_data_dir(),
            out_dir: PathBuf::from("runs"),
            per_client_cap: None,
            test_limit: None,
            grad_metrics: true,
            parallel: false,
        }
    }
}

pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta {} outside (0, 1]", self.delta));
        }
        if self.clients == 0 {
            return bad("at least one client required".into());
        }
        if self.local_epochs == 0 {
            return bad("local epochs must be at least 1".into());
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("learning rate {} must be positive", self.eta));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.per_client_cap == Some(0) {
            return bad("per-client cap must be at least 1".into());
        }
        self.round_count().map(|_| ())
    }

    /// Rounds to run: either given directly or `total_steps / local_epochs`.
    pub fn round_count(&self) -> Result<usize> {
        match (self.rounds, self.total_steps) {
            (Some(_), Some(_)) => Err(Error::Config("--rounds and --total-steps are mutually exclusive".into())),
            (None, None) => Err(Error::Config("one of --rounds or --total-steps is required".into())),
            (Some(0), None) => Err(Error::Config("rounds must be at least 1".into())),
            (Some(r), None) => Ok(r),
            (None, Some(t)) => {
                if self.local_epochs == 0 || t % self.local_epochs != 0 || t == 0 {
                    Err(Error::Config(format!(
                        "total steps {t} is not a positive multiple of local epochs {}",
                        self.local_epochs
                    )))
                } else {
                    Ok(t / self.local_epochs)
                }
            }
        }
    }

    pub fn schedule(&self) -> LocalSchedule {
        match self.local_unit {
            LocalUnit::Epochs => LocalSchedule::Epochs(self.local_epochs),
            LocalUnit::Steps => LocalSchedule::Steps(self.local_epochs),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Command-line flags that reproduce this configuration.
    pub fn render(&self) -> Vec<String> {
        let mut args = vec![
            "--abo".to_string(),
            self.abo.to_string(),
            "--delta".into(),
            self.delta.to_string(),
            "--clients".into(),
            self.clients.to_string(),
        ];
        if let Some(r) = self.rounds {
            args.extend(["--rounds".into(), r.to_string()]);
        }
        if let Some(t) = self.total_steps {
            args.extend(["--total-steps".into(), t.to_string()]);
        }
        args.extend([
            "--epochs".into(),
            self.local_epochs.to_string(),
            "--local-unit".into(),
            match self.local_unit {
                LocalUnit::Epochs => "epochs".into(),
                LocalUnit::Steps => "steps".into(),
            },
            "--lr".into(),
            self.eta.to_string(),
            "--batch".into(),
            self.batch_size.to_string(),
            "--seed".into(),
            self.seed.to_string(),
            "--data-dir".into(),
            self.data_dir.display().to_string(),
            "--out".into(),
            self.out_dir.display().to_string(),
        ]);
        if let Some(c) = self.per_client_cap {
            args.extend(["--per-client-cap".into(), c.to_string()]);
        }
        if let Some(t) = self.test_limit {
            args.extend(["--test-limit".into(), t.to_string()]);
        }
        if !self.grad_metrics {
            args.push("--no-grad-metrics".into());
        }
        if self.parallel {
            args.push("--parallel".into());
        }
        args
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    Delta(Vec<f64>),
    Epochs(Vec<usize>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Delta(_) => "delta",
            SweepAxis::Epochs(_) => "epochs",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Delta(v) => v.len(),
            SweepAxis::Epochs(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A fully resolved command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Invocation {
    pub config: ExperimentConfig,
    pub sweep: Option<SweepAxis>,
    /// `--abo` was given explicitly, so a sweep runs only that operator.
    pub abo_pinned: bool,
    pub jobs: usize,
    pub fetch: bool,
    pub mirror: String,
}

/// Federated LoRA fine-tuning simulator.
#[derive(Debug, Parser)]
#[command(name = "fedlora", version, about)]
pub struct CliArgs {
    /// Aggregation-broadcast operator.
    #[arg(long, value_parser = parse_abo)]
    abo: Option<AboKind>,
    /// LoRA rank scale ratio in (0, 1].
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Total local epochs per client; rounds = total / epochs.
    #[arg(long = "total-steps")]
    total_steps: Option<usize>,
    /// Local epochs (or steps, see --local-unit) between synchronisations.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "local-unit", value_enum)]
    local_unit: Option<LocalUnit>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "data-dir", env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Download MNIST into the data directory if it is missing.
    #[arg(long)]
    fetch: bool,
    #[arg(long, default_value = crate::data::DEFAULT_MIRROR)]
    mirror: String,
    /// Concurrent sweep cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long = "sweep-delta", value_delimiter = ',')]
    sweep_delta: Option<Vec<f64>>,
    #[arg(long = "sweep-epochs", value_delimiter = ',')]
    sweep_epochs: Option<Vec<usize>>,
    /// Keep at most N training samples per client.
    #[arg(long = "per-client-cap")]
    per_client_cap: Option<usize>,
    /// Evaluate on the first N test samples.
    #[arg(long = "test-limit")]
    test_limit: Option<usize>,
    /// Skip the per-round gradient metrics.
    #[arg(long = "no-grad-metrics")]
    no_grad_metrics: bool,
    /// Train clients on the rayon pool.
    #[arg(long)]
    parallel: bool,
    /// JSON file with base configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_abo(s: &str) -> std::result::Result<AboKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl CliArgs {
    pub fn resolve(self) -> Result<Invocation> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        if self.rounds.is_some() && self.total_steps.is_some() {
            return Err(Error::Config("--rounds and --total-steps are mutually exclusive".into()));
        }
        if let Some(v) = self.abo {
            c.abo = v;
        }
        if let Some(v) = self.delta {
            c.delta = v;
        }
        if let Some(v) = self.clients {
            c.clients = v;
        }
        if let Some(v) = self.rounds {
            c.rounds = Some(v);
            c.total_steps = None;
        }
        if let Some(v) = self.total_steps {
            c.total_steps = Some(v);
            c.rounds = None;
        }
        if let Some(v) = self.epochs {
            c.local_epochs = v;
        }
        if let Some(v) = self.local_unit {
            c.local_unit = v;
        }
        if let Some(v) = self.lr {
            c.eta = v;
        }
        if let Some(v) = self.batch {
            c.batch_size = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.data_dir {
            c.data_dir = v;
        }
        if let Some(v) = self.out {
            c.out_dir = v;
        }
        if let Some(v) = self.per_client_cap {
            c.per_client_cap = Some(v);
        }
        if let Some(v) = self.test_limit {
            c.test_limit = Some(v);
        }
        if self.no_grad_metrics {
            c.grad_metrics = false;
        }
        if self.parallel {
            c.parallel = true;
        }
        c.validate()?;

        let sweep = match (self.sweep_delta, self.sweep_epochs) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("sweep over one axis at a time".into()));
            }
            (Some(d), None) => Some(SweepAxis::Delta(d)),
            (None, Some(e)) => Some(SweepAxis::Epochs(e)),
            (None, None) => None,
        };
        if let Some(axis) = &sweep {
            if axis.is_empty() {
                return Err(Error::Config("sweep axis is empty".into()));
            }
            let mut probe = c.clone();
            match axis {
                SweepAxis::Delta(v) => {
                    for &d in v {
                        probe.delta = d;
                        probe.validate()?;
                    }
                }
                SweepAxis::Epochs(v) => {
                    for &e in v {
                        probe.local_epochs = e;
                        probe.validate()?;
                    }
                }
            }
        }
        if self.jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        Ok(Invocation {
            config: c,
            sweep,
            abo_pinned: self.abo.is_some(),
            jobs: self.jobs,
            fetch: self.fetch,
            mirror: self.mirror,
        })
    }
}

/// Parses a full argument vector (program name first).
pub fn parse_config<I, T>(argv: I) -> Result<Invocation>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    CliArgs::try_parse_from(argv)
        .map_err(|e| Error::Config(e.to_string()))?
        .resolve()
}
