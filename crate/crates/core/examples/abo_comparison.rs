//! SP and PS applied to the same perturbed client factors: residuals,
//! broadcast error and the spectrum behind SP's truncation.

use fedlora::diagnostics;
use fedlora::federation::{AggregationBroadcast, ProductSum, SumProduct};
use fedlora::linalg::Matrix;
use fedlora::lora_model::LoraMlp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fedlora::Result<()> {
    let base = LoraMlp::build(0.1, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let clients: Vec<LoraMlp> = (0..10)
        .map(|_| {
            let mut m = base.clone();
            for l in &mut m.layers {
                l.b = Matrix::from_fn(l.b.rows(), l.b.cols(), |_, _| rng.random_range(-0.1..0.1));
                l.a = Matrix::from_fn(l.a.rows(), l.a.cols(), |_, _| rng.random_range(-0.1..0.1));
            }
            m
        })
        .collect();
    let refs: Vec<&LoraMlp> = clients.iter().collect();
    println!("ranks {:?}", base.ranks());
    println!("{:<4} {:>12} {:>12} {:>12} {:>12}", "abo", "weak", "P", "Q", "broadcast");
    for op in [&SumProduct as &dyn AggregationBroadcast, &ProductSum] {
        let abo = op.aggregate(&refs)?;
        let (p, q) = diagnostics::strong_residuals(&refs, &abo)?;
        println!(
            "{:<4} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
            op.name(),
            diagnostics::weak_residual(&refs, &abo)?,
            p,
            q,
            diagnostics::broadcast_error(&abo)?
        );
        if let Some(sigma) = &abo.layers[0].singular_values {
            let r = base.ranks()[0];
            let shown: Vec<String> = sigma[r - 1..r + 3].iter().map(|v| format!("{v:.3e}")).collect();
            println!("     layer 0 σ around the cut (r = {r}): {}", shown.join(" "));
        }
    }
    Ok(())
}
