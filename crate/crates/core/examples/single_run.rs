//! A short federated run at desk scale, written to `runs/`.
//!
//! `cargo run --release --example single_run -- ps 0.5`

use fedlora::config::ExperimentConfig;
use fedlora::{data, runner};

fn main() -> fedlora::Result<()> {
    let mut args = std::env::args().skip(1);
    let abo = args.next().unwrap_or_else(|| "ps".into()).parse()?;
    let delta = args.next().map(|d| d.parse().expect("delta")).unwrap_or(1.0);
    let config = ExperimentConfig {
        abo,
        delta,
        rounds: Some(20),
        local_epochs: 1,
        eta: 0.05,
        per_client_cap: Some(640),
        test_limit: Some(2000),
        grad_metrics: false,
        ..ExperimentConfig::default()
    };
    let (train, test) = data::load_mnist(&config.data_dir)?;
    let out = runner::run(&config, &train, &test)?;
    for m in out.metrics.iter().step_by(5) {
        println!(
            "round {:>3}: loss {:.4}  acc {:.4}  weak {:.3e}  broadcast {:.3e}",
            m.round, m.train_loss, m.test_accuracy, m.weak_residual, m.broadcast_error
        );
    }
    println!("best {:.4}, artefacts in {}", out.best_accuracy(), out.dir.display());
    Ok(())
}
