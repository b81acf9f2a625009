//! PS under a fixed epoch budget split into more or fewer rounds.

use fedlora::config::{ExperimentConfig, SweepAxis};
use fedlora::federation::AboKind;
use fedlora::{data, runner};

fn main() -> fedlora::Result<()> {
    let base = ExperimentConfig {
        abo: AboKind::Ps,
        rounds: None,
        total_steps: Some(30),
        eta: 0.05,
        per_client_cap: Some(320),
        test_limit: Some(2000),
        grad_metrics: false,
        ..ExperimentConfig::default()
    };
    let (train, test) = data::load_mnist(&base.data_dir)?;
    let summary = runner::sweep(&base, &SweepAxis::Epochs(vec![1, 5, 10]), true, 1, &train, &test)?;
    for c in &summary.cells {
        println!("E={:<3} rounds {:<3} best {:.4}", c.local_epochs, c.rounds, c.best_accuracy.unwrap_or(f64::NAN));
    }
    Ok(())
}
