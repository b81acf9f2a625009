mod common;

use common::*;
use fedlora::linalg::{self, Matrix};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..9, 1usize..9)
}

fn orthonormality_gap(q: &Matrix) -> f64 {
    let g = linalg::matmul_tn(q, q).unwrap();
    g.max_abs_diff(&Matrix::identity(q.cols()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_agrees_with_naive_and_associates((m, k) in dims(), (n, p) in dims(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_matrix(&mut r, m, k, 1.0);
        let b = random_matrix(&mut r, k, n, 1.0);
        let c = random_matrix(&mut r, n, p, 1.0);
        let ab = linalg::matmul(&a, &b).unwrap();
        prop_assert!(ab.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let left = linalg::matmul(&ab, &c).unwrap();
        let right = linalg::matmul(&a, &linalg::matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-12);
        let tn = linalg::matmul_tn(&a.transpose(), &b).unwrap();
        let nt = linalg::matmul_nt(&a, &b.transpose()).unwrap();
        prop_assert!(tn.max_abs_diff(&ab) < 1e-12);
        prop_assert!(nt.max_abs_diff(&ab) < 1e-12);
    }

    #[test]
    fn svd_factors_are_orthonormal_and_reconstruct(m in (1usize..12).prop_flat_map(|r| (1usize..12).prop_flat_map(move |c| matrix(r, c)))) {
        let s = linalg::svd(&m).unwrap();
        prop_assert!(s.reconstruct().max_abs_diff(&m) < 1e-10);
        prop_assert!(orthonormality_gap(&s.u) < 1e-10);
        prop_assert!(orthonormality_gap(&s.vt.transpose()) < 1e-10);
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn singular_values_match_gram_eigenvalues(m in (1usize..10).prop_flat_map(|r| (1usize..10).prop_flat_map(move |c| matrix(r, c)))) {
        let s = linalg::svd(&m).unwrap();
        let oracle = squared_singular_values(&m);
        for (k, &sv) in s.sigma.iter().enumerate() {
            prop_assert!((sv * sv - oracle[k]).abs() < 1e-9 * (1.0 + oracle[0]));
        }
    }

    #[test]
    fn truncation_error_is_tail_energy(m in (2usize..10).prop_flat_map(|r| (2usize..10).prop_flat_map(move |c| matrix(r, c))), frac in 0.0f64..1.0) {
        let s = linalg::svd(&m).unwrap();
        let k = s.sigma.len();
        let r = 1 + ((k - 1) as f64 * frac) as usize;
        let (b, a) = linalg::truncate_svd(&s, r).unwrap();
        let approx = naive_matmul(&b, &a);
        let err = naive_frob_sq(&m.sub(&approx).unwrap());
        let oracle: f64 = squared_singular_values(&m).iter().skip(r).sum();
        prop_assert!((err - oracle).abs() < 1e-9 * (1.0 + naive_frob_sq(&m)));
    }

    #[test]
    fn truncation_beats_random_rank_r_candidates(m in (2usize..8).prop_flat_map(|r| (2usize..8).prop_flat_map(move |c| matrix(r, c))), seed in any::<u64>()) {
        let s = linalg::svd(&m).unwrap();
        let (b, a) = linalg::truncate_svd(&s, 1).unwrap();
        let best = linalg::frobenius_dist_sq(&m, &linalg::matmul(&b, &a).unwrap()).unwrap();
        let mut r = rng(seed);
        for _ in 0..20 {
            let cb = random_matrix(&mut r, m.rows(), 1, 1.0);
            let ca = random_matrix(&mut r, 1, m.cols(), 1.0);
            let d = linalg::frobenius_dist_sq(&m, &naive_matmul(&cb, &ca)).unwrap();
            prop_assert!(best <= d + 1e-12);
        }
    }

    #[test]
    fn frobenius_agrees_with_naive(m in (1usize..9).prop_flat_map(|r| (1usize..9).prop_flat_map(move |c| matrix(r, c)))) {
        prop_assert!((linalg::frobenius_norm_sq(&m) - naive_frob_sq(&m)).abs() < 1e-12);
        prop_assert!((linalg::frobenius_inner(&m, &m).unwrap() - naive_frob_sq(&m)).abs() < 1e-12);
    }
}

#[test]
fn rank_deficient_input_has_exact_numeric_rank() {
    let mut r = rng(7);
    let u = random_matrix(&mut r, 30, 3, 1.0);
    let v = random_matrix(&mut r, 3, 40, 1.0);
    let s = linalg::svd(&naive_matmul(&u, &v)).unwrap();
    assert_eq!(s.numeric_rank(), 3);
    assert!(s.tail_energy(3) < 1e-20);
    assert!(orthonormality_gap(&s.u) < 1e-10);
}
