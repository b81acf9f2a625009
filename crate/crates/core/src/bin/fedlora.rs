use std::process::ExitCode;

use clap::Parser;
use fedlora::config::CliArgs;
use fedlora::runner::{self, Outcome};
use fedlora::Error;

fn report(e: &Error) {
    let line = serde_json::json!({
        "error": e.kind(),
        "retryable": e.is_retryable(),
        "message": e.to_string(),
    });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = CliArgs::parse();
    let inv = match args.resolve() {
        Ok(inv) => inv,
        Err(e) => {
            report(&e);
            return ExitCode::from(2);
        }
    };
    match runner::execute(&inv) {
        Ok(Outcome::Run(out)) => {
            println!("run {} best_accuracy={:.4} dir={}", out.run_id, out.best_accuracy(), out.dir.display());
            ExitCode::SUCCESS
        }
        Ok(Outcome::Sweep(summary)) => {
            for c in &summary.cells {
                match (&c.best_accuracy, &c.error) {
                    (Some(acc), _) => println!("{} delta={} epochs={} best_accuracy={acc:.4}", c.abo, c.delta, c.local_epochs),
                    (None, Some(err)) => println!("{} delta={} epochs={} failed: {err}", c.abo, c.delta, c.local_epochs),
                    _ => {}
                }
            }
            println!("summary {}", summary.dir.join(runner::SUMMARY_FILE).display());
            if summary.any_failed() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}
