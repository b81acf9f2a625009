//! Truncated SVD of a noisy low-rank matrix: reconstruction error per rank
//! against the discarded singular-value energy.

use fedlora::linalg::{self, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fedlora::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u = Matrix::from_fn(40, 4, |_, _| rng.random_range(-1.0..1.0));
    let v = Matrix::from_fn(4, 60, |_, _| rng.random_range(-1.0..1.0));
    let mut m = linalg::matmul(&u, &v)?;
    m.axpy(1.0, &Matrix::from_fn(40, 60, |_, _| rng.random_range(-0.01..0.01)))?;

    let s = linalg::svd(&m)?;
    println!("converged in {} sweeps, numeric rank {}", s.sweeps, s.numeric_rank());
    println!("{:>4} {:>14} {:>14}", "r", "‖M - BA‖²", "tail energy");
    for r in 1..=6 {
        let (b, a) = linalg::truncate_svd(&s, r)?;
        let err = linalg::frobenius_dist_sq(&m, &linalg::matmul(&b, &a)?)?;
        println!("{r:>4} {err:>14.6e} {:>14.6e}", s.tail_energy(r));
    }
    Ok(())
}
