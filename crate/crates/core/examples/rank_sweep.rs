//! Best accuracy of both operators across rank ratios, at desk scale.

use fedlora::config::{ExperimentConfig, SweepAxis};
use fedlora::{data, runner};

fn main() -> fedlora::Result<()> {
    let base = ExperimentConfig {
        rounds: Some(30),
        local_epochs: 1,
        eta: 0.05,
        per_client_cap: Some(320),
        test_limit: Some(2000),
        grad_metrics: false,
        ..ExperimentConfig::default()
    };
    let (train, test) = data::load_mnist(&base.data_dir)?;
    let summary = runner::sweep(&base, &SweepAxis::Delta(vec![1.0, 0.5, 0.1]), false, 1, &train, &test)?;
    for c in &summary.cells {
        println!("{} δ={:<4} best {:.4}", c.abo, c.delta, c.best_accuracy.unwrap_or(f64::NAN));
    }
    println!("summary in {}", summary.dir.display());
    Ok(())
}
