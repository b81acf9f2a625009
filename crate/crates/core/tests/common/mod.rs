#![allow(dead_code)]

use std::path::PathBuf;

use fedlora::data::{self, Dataset};
use fedlora::linalg::Matrix;
use fedlora::lora_model::{Activation, LayerSpec, LoraMlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
}

pub fn naive_frob_sq(m: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            s += m[(i, j)] * m[(i, j)];
        }
    }
    s
}

pub fn naive_mean(ms: &[Matrix]) -> Matrix {
    let (r, c) = ms[0].shape();
    Matrix::from_fn(r, c, |i, j| ms.iter().map(|m| m[(i, j)]).sum::<f64>() / ms.len() as f64)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| m[(i, j)]).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Squared singular values of `m` via the smaller Gram matrix, descending.
pub fn squared_singular_values(m: &Matrix) -> Vec<f64> {
    let t = m.transpose();
    let gram = if m.rows() <= m.cols() { naive_matmul(m, &t) } else { naive_matmul(&t, m) };
    sym_eigenvalues(&gram).into_iter().map(|v| v.max(0.0)).collect()
}

/// Small network with the production layer layout but toy widths.
pub fn toy_model(seed: u64, dims: &[usize], ranks: &[usize]) -> LoraMlp {
    let specs: Vec<LayerSpec> = dims
        .windows(2)
        .zip(ranks)
        .enumerate()
        .map(|(i, (w, &rank))| LayerSpec {
            inputs: w[0],
            outputs: w[1],
            rank,
            activation: if i + 2 == dims.len() { Activation::Softmax } else { Activation::Relu },
        })
        .collect();
    LoraMlp::with_architecture(&specs, seed).unwrap()
}

/// Copies of `model` whose factors and biases are independently perturbed.
pub fn perturbed_replicas(model: &LoraMlp, m: usize, seed: u64, scale: f64) -> Vec<LoraMlp> {
    let mut r = rng(seed);
    (0..m)
        .map(|_| {
            let mut c = model.clone();
            for l in &mut c.layers {
                l.b = random_matrix(&mut r, l.b.rows(), l.b.cols(), scale);
                l.a = random_matrix(&mut r, l.a.rows(), l.a.cols(), scale);
                for v in &mut l.bias {
                    *v = r.random_range(-scale..scale);
                }
            }
            c
        })
        .collect()
}

/// `per_class` samples of each digit with `dim` features in [0, 1].
pub fn toy_dataset(per_class: usize, dim: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let n = per_class * 10;
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let images = Matrix::from_fn(n, dim, |i, j| {
        let signal = if j % 10 == labels[i] as usize { 0.8 } else { 0.0 };
        (signal + r.random_range(0.0..0.2f64)).min(1.0)
    });
    Dataset::new(images, labels).unwrap()
}

/// Location of the MNIST IDX files, if present.
pub fn mnist_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("FEDLORA_DATA_DIR").map(PathBuf::from),
        Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|d| d.join(data::TRAIN_IMAGES).is_file())
}
