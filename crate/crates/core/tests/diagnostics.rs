mod common;

use common::*;
use fedlora::data;
use fedlora::diagnostics::{self, ConstantEstimates, StepRecord};
use fedlora::federation::{self, AggregationBroadcast, LocalSchedule, ProductSum, RoundOptions, SumProduct};
use fedlora::linalg::Matrix;
use fedlora::lora_model::LoraMlp;
use proptest::prelude::*;

const DIMS: [usize; 4] = [10, 7, 5, 10];
const RANKS: [usize; 3] = [2, 3, 1];

fn refs(models: &[LoraMlp]) -> Vec<&LoraMlp> {
    models.iter().collect()
}

fn product(m: &LoraMlp, l: usize) -> Matrix {
    naive_matmul(&m.layers[l].b, &m.layers[l].a)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn residuals_match_brute_force(seed in any::<u64>(), m in 1usize..6) {
        let replicas = perturbed_replicas(&toy_model(seed, &DIMS, &RANKS), m, seed.wrapping_add(1), 0.8);
        for op in [&SumProduct as &dyn AggregationBroadcast, &ProductSum] {
            let abo = op.aggregate(&refs(&replicas)).unwrap();
            let (mut weak, mut p, mut q, mut bcast) = (0.0, 0.0, 0.0, 0.0);
            for (l, bc) in abo.layers.iter().enumerate() {
                let star = naive_matmul(&bc.b_star, &bc.a_star);
                let products: Vec<Matrix> = replicas.iter().map(|r| product(r, l)).collect();
                for (r, prod) in replicas.iter().zip(&products) {
                    weak += naive_frob_sq(&star.sub(prod).unwrap()) / m as f64;
                    p += naive_frob_sq(&bc.b_star.sub(&r.layers[l].b).unwrap()) / m as f64;
                    q += naive_frob_sq(&bc.a_star.sub(&r.layers[l].a).unwrap()) / m as f64;
                }
                bcast += naive_frob_sq(&naive_mean(&products).sub(&star).unwrap());
            }
            let tol = |x: f64| 1e-10 * (1.0 + x);
            prop_assert!((diagnostics::weak_residual(&refs(&replicas), &abo).unwrap() - weak).abs() < tol(weak));
            let (sp, sq) = diagnostics::strong_residuals(&refs(&replicas), &abo).unwrap();
            prop_assert!((sp - p).abs() < tol(p) && (sq - q).abs() < tol(q));
            prop_assert!((diagnostics::broadcast_error(&abo).unwrap() - bcast).abs() < tol(bcast));
        }
    }

    #[test]
    fn sp_full_rank_weak_residual_never_exceeds_ps(seed in any::<u64>(), m in 2usize..5) {
        // Full rank on a single 6x4 layer.
        let replicas = perturbed_replicas(&toy_model(seed, &[4, 6], &[4]), m, seed ^ 9, 1.0);
        let sp = SumProduct.aggregate(&refs(&replicas)).unwrap();
        let ps = ProductSum.aggregate(&refs(&replicas)).unwrap();
        let wsp = diagnostics::weak_residual(&refs(&replicas), &sp).unwrap();
        let wps = diagnostics::weak_residual(&refs(&replicas), &ps).unwrap();
        prop_assert!(wsp <= wps + 1e-10 * (1.0 + wps));
    }
}

#[test]
fn corollary_constants_scale_with_epochs() {
    let mut est = ConstantEstimates::new(2);
    est.observe(0, 2.0, 0.5, 1.5);
    est.observe(1, 1.0, 3.0, 0.1);
    let (g, ca, cb) = (2.0f64, 3.0f64, 1.5f64);
    assert_eq!((est.g_hat(), est.c_a_hat(), est.c_b_hat()), (g, ca, cb));
    for e in [1.0, 5.0, 10.0] {
        let c = diagnostics::corollary_constants(&est, e, 0.05);
        let r2 = 8.0 * e * e * g * g * (ca.powi(4) + cb.powi(4));
        let p2 = 4.0 * e * e * g * g * ca.powi(4);
        let q2 = 4.0 * e * e * g * g * cb.powi(4);
        assert!((c.r2_weak - r2).abs() < 1e-9 * r2);
        assert!((c.p2 - p2).abs() < 1e-9 * p2);
        assert!((c.q2 - q2).abs() < 1e-9 * q2);
        assert!((c.q2_proof - 4.0 * e * e * g * g * cb * cb).abs() < 1e-9 * c.q2_proof);
        let strong = 4.0 * p2 * q2 * 0.05 * 0.05 + 3.0 * cb * cb * q2 + 3.0 * ca * ca * p2;
        assert!((c.r2_strong - strong).abs() < 1e-9 * strong);
    }
    let one = diagnostics::corollary_constants(&est, 1.0, 0.05);
    let ten = diagnostics::corollary_constants(&est, 10.0, 0.05);
    assert!((ten.r2_weak / one.r2_weak - 100.0).abs() < 1e-9);
}

#[test]
fn single_client_local_and_global_grad_metrics_coincide() {
    let model = perturbed_replicas(&toy_model(3, &DIMS, &RANKS), 1, 4, 0.3).remove(0);
    let ds = toy_dataset(3, DIMS[0], 5);
    let eval = vec![ds.gather(&(0..30).collect::<Vec<_>>())];
    let (local, global) = diagnostics::grad_metrics(&[&model], &model, &eval).unwrap();
    assert!(local > 0.0);
    assert!((local - global).abs() < 1e-14 * local);
}

#[test]
fn grad_metrics_are_finite_and_non_negative_over_rounds() {
    let ds = toy_dataset(12, DIMS[0], 6);
    let shards = data::partition_by_label(&ds, 10).unwrap();
    let mut clients = federation::setup_clients(&toy_model(6, &DIMS, &RANKS), shards, 6);
    let mut est = ConstantEstimates::new(RANKS.len());
    for round in 1..=3 {
        let out = federation::run_round(&mut clients, &SumProduct, &ds, 0.2, LocalSchedule::Epochs(1), 4, RoundOptions::default()).unwrap();
        let m = diagnostics::evaluate_round(round, &out, &clients, &ds, &ds, &mut est, 1.0, 0.2, true).unwrap();
        assert!(m.local_grad_metric.is_finite() && m.local_grad_metric >= 0.0);
        assert!(m.global_grad_metric.is_finite() && m.global_grad_metric >= 0.0);
        assert!(m.g_hat > 0.0 && m.c_a_hat > 0.0);
        assert_eq!(m.layers.len(), RANKS.len());
        let layer_sum: f64 = m.layers.iter().map(|l| l.weak_residual).sum();
        assert!((layer_sum - m.weak_residual).abs() < 1e-15 * (1.0 + layer_sum));
    }
}

#[test]
fn audited_steps_satisfy_expansion_and_bound() {
    let ds = toy_dataset(6, DIMS[0], 8);
    let shards = data::partition_by_label(&ds, 10).unwrap();
    let mut clients = federation::setup_clients(&toy_model(8, &DIMS, &RANKS), shards, 8);
    let mut running = ConstantEstimates::new(RANKS.len());
    let options = RoundOptions { audit_steps: true, parallel: false };
    for _ in 0..2 {
        let out = federation::run_round(&mut clients, &ProductSum, &ds, 0.3, LocalSchedule::Epochs(1), 2, options).unwrap();
        for s in &out.stats {
            assert_eq!(s.audits.len(), s.steps * RANKS.len());
            for a in &s.audits {
                assert!(a.expansion_rel_error < 1e-8, "{a:?}");
            }
            for rec in diagnostics::lemma2_records(&s.audits, &mut running) {
                diagnostics::check_lemma2_bound(&rec).unwrap();
            }
        }
    }
}

#[test]
fn corrupted_record_fails_with_negative_slack() {
    let ok = StepRecord { update_norm_sq: 1e-6, eta: 0.1, g_hat: 1.0, c_a_hat: 1.0, c_b_hat: 1.0 };
    let check = diagnostics::check_lemma2_bound(&ok).unwrap();
    assert!(check.slack > 0.0);
    let bad = StepRecord { update_norm_sq: ok.update_norm_sq * 1e6, ..ok };
    let err = diagnostics::check_lemma2_bound(&bad).unwrap_err();
    assert_eq!(err.kind(), "bound_violation");
    assert!(err.to_string().contains("slack -"));
}
