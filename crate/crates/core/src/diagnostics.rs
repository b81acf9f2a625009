//! Per-round measurements of the quantities the convergence analysis is
//! stated in: condition residuals, broadcast error, gradient metrics,
//! empirical bounding constants and the per-step update-norm bound.
//!
//! Expectations are replaced by one realisation per round. Biases are left
//! out of every factor quantity.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{AboResult, ClientState, RoundOutcome};
use crate::linalg::{self, Matrix};
use crate::lora_model::{GradDetail, GradientSet, LayerGrad, LoraLayer, LoraMlp};

/// Running maxima of `‖∇_W L‖_F`, `‖A‖_F` and `‖B‖_F` for one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerConstants {
    pub g: f64,
    pub c_a: f64,
    pub c_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    pub per_layer: Vec<LayerConstants>,
}

impl ConstantEstimates {
    pub fn new(layers: usize) -> Self {
        ConstantEstimates {
            per_layer: vec![LayerConstants::default(); layers],
        }
    }

    pub fn observe(&mut self, layer: usize, grad_w_norm: f64, a_norm: f64, b_norm: f64) {
        let c = &mut self.per_layer[layer];
        c.g = c.g.max(grad_w_norm);
        c.c_a = c.c_a.max(a_norm);
        c.c_b = c.c_b.max(b_norm);
    }

    pub fn g_hat(&self) -> f64 {
        self.per_layer.iter().map(|c| c.g).fold(0.0, f64::max)
    }

    pub fn c_a_hat(&self) -> f64 {
        self.per_layer.iter().map(|c| c.c_a).fold(0.0, f64::max)
    }

    pub fn c_b_hat(&self) -> f64 {
        self.per_layer.iter().map(|c| c.c_b).fold(0.0, f64::max)
    }

    fn absorb(&mut self, outcome: &RoundOutcome) {
        for s in &outcome.stats {
            for l in 0..self.per_layer.len() {
                self.observe(l, s.max_grad_w[l], s.max_a[l], s.max_b[l]);
            }
        }
    }
}

fn check_clients(pre: &[&LoraMlp], abo: &AboResult) -> Result<()> {
    if pre.is_empty() {
        return Err(Error::Contract("residual over zero clients".into()));
    }
    if pre.iter().any(|m| m.layers.len() != abo.layers.len()) {
        return Err(Error::Contract("client layer count differs from broadcast".into()));
    }
    Ok(())
}

/// Per layer: `(1/m) Σ_i ‖b*a* − B_i A_i‖_F²`.
pub fn weak_residual_layers(pre: &[&LoraMlp], abo: &AboResult) -> Result<Vec<f64>> {
    check_clients(pre, abo)?;
    let inv = 1.0 / pre.len() as f64;
    abo.layers
        .iter()
        .enumerate()
        .map(|(l, bc)| {
            let mut sum = 0.0;
            for m in pre {
                sum += linalg::frobenius_dist_sq(&bc.broadcast_product, &m.layers[l].delta_w())?;
            }
            Ok(sum * inv)
        })
        .collect()
}

pub fn weak_residual(pre: &[&LoraMlp], abo: &AboResult) -> Result<f64> {
    Ok(weak_residual_layers(pre, abo)?.iter().sum())
}

/// Per layer: `((1/m) Σ‖b* − B_i‖², (1/m) Σ‖a* − A_i‖²)`.
pub fn strong_residual_layers(pre: &[&LoraMlp], abo: &AboResult) -> Result<Vec<(f64, f64)>> {
    check_clients(pre, abo)?;
    let inv = 1.0 / pre.len() as f64;
    abo.layers
        .iter()
        .enumerate()
        .map(|(l, bc)| {
            let (mut p, mut q) = (0.0, 0.0);
            for m in pre {
                p += linalg::frobenius_dist_sq(&bc.b_star, &m.layers[l].b)?;
                q += linalg::frobenius_dist_sq(&bc.a_star, &m.layers[l].a)?;
            }
            Ok((p * inv, q * inv))
        })
        .collect()
}

pub fn strong_residuals(pre: &[&LoraMlp], abo: &AboResult) -> Result<(f64, f64)> {
    Ok(strong_residual_layers(pre, abo)?
        .iter()
        .fold((0.0, 0.0), |(p, q), (lp, lq)| (p + lp, q + lq)))
}

pub fn broadcast_error_layers(abo: &AboResult) -> Result<Vec<f64>> {
    abo.layers
        .iter()
        .map(|bc| linalg::frobenius_dist_sq(&bc.delta_w_full, &bc.broadcast_product))
        .collect()
}

/// `Σ_layers ‖(1/m)Σ B_i A_i − b*a*‖_F²`
pub fn broadcast_error(abo: &AboResult) -> Result<f64> {
    Ok(broadcast_error_layers(abo)?.iter().sum())
}

/// `(local, global)` gradient metrics.
///
/// `local` is `(1/m) Σ_i ‖∇_B L_i(W_i)‖² + ‖∇_A L_i(W_i)‖²` at each client's
/// own parameters; `global` is `‖∇_B L(W)‖² + ‖∇_A L(W)‖²` for the mean loss
/// at the shared parameters `W`. Each client's loss is its evaluation batch.
pub fn grad_metrics(local: &[&LoraMlp], global: &LoraMlp, eval: &[(Matrix, Vec<u8>)]) -> Result<(f64, f64)> {
    if local.len() != eval.len() || local.is_empty() {
        return Err(Error::Contract("one evaluation batch per client required".into()));
    }
    let inv = 1.0 / local.len() as f64;
    let mut local_sum = 0.0;
    let mut mean: Option<GradientSet> = None;
    for (model, (x, y)) in local.iter().zip(eval) {
        let (_, g) = model.loss_and_grads_with(x, y, GradDetail::Factors)?;
        local_sum += g.factor_norm_sq();
        let (_, gg) = global.loss_and_grads_with(x, y, GradDetail::Factors)?;
        match mean.as_mut() {
            None => mean = Some(gg),
            Some(acc) => {
                for (a, b) in acc.layers.iter_mut().zip(&gg.layers) {
                    a.grad_b.axpy(1.0, &b.grad_b)?;
                    a.grad_a.axpy(1.0, &b.grad_a)?;
                }
            }
        }
    }
    let global_metric = mean.expect("non-empty").factor_norm_sq() * inv * inv;
    Ok((local_sum * inv, global_metric))
}

/// Plug-in values of the corollary constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryConstants {
    /// `8E²G²(C_A⁴ + C_B⁴)`
    pub r2_weak: f64,
    /// `4E²G²C_A⁴`
    pub p2: f64,
    /// `4E²G²C_B⁴`
    pub q2: f64,
    /// `4E²G²C_B²`, the form the appendix proof arrives at.
    pub q2_proof: f64,
    /// `4P²Q²η² + 3C_B²Q² + 3C_A²P²`
    pub r2_strong: f64,
}

pub fn corollary_constants(est: &ConstantEstimates, local_epochs: f64, eta: f64) -> CorollaryConstants {
    let (g, ca, cb) = (est.g_hat(), est.c_a_hat(), est.c_b_hat());
    let e2g2 = local_epochs * local_epochs * g * g;
    let r2_weak = 8.0 * e2g2 * (ca.powi(4) + cb.powi(4));
    let p2 = 4.0 * e2g2 * ca.powi(4);
    let q2 = 4.0 * e2g2 * cb.powi(4);
    let q2_proof = 4.0 * e2g2 * cb * cb;
    let r2_strong = 4.0 * p2 * q2 * eta * eta + 3.0 * cb * cb * q2 + 3.0 * ca * ca * p2;
    CorollaryConstants {
        r2_weak,
        p2,
        q2,
        q2_proof,
        r2_strong,
    }
}

/// One layer's view of one local SGD step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAudit {
    pub client: usize,
    pub step: u64,
    pub layer: usize,
    pub eta: f64,
    /// `‖B⁺A⁺ − BA‖_F²`
    pub update_norm_sq: f64,
    /// Relative gap between the observed update and its closed-form expansion.
    pub expansion_rel_error: f64,
    pub grad_w_norm: f64,
    pub a_norm: f64,
    pub b_norm: f64,
}

/// `η²∇_W Aᵀ Bᵀ ∇_W − η ∇_B A − η B ∇_A`, the exact change of `BA` under one
/// simultaneous SGD step from `(B, A)`.
pub fn one_step_expansion(b: &Matrix, a: &Matrix, grad_w: &Matrix, eta: f64) -> Result<Matrix> {
    let grad_b = linalg::matmul_nt(grad_w, a)?;
    let grad_a = linalg::matmul_tn(b, grad_w)?;
    let mut out = linalg::matmul(&grad_b, &grad_a)?.scale(eta * eta);
    out.axpy(-eta, &linalg::matmul(&grad_b, a)?)?;
    out.axpy(-eta, &linalg::matmul(b, &grad_a)?)?;
    Ok(out)
}

pub fn audit_step(
    client: usize,
    step: u64,
    layer: usize,
    eta: f64,
    before: &LoraLayer,
    after: &LoraLayer,
    grad: &LayerGrad,
) -> Result<StepAudit> {
    let grad_w = grad
        .grad_w
        .as_ref()
        .ok_or_else(|| Error::Contract("step audit needs the full weight gradient".into()))?;
    let observed = after.delta_w().sub(&before.delta_w())?;
    let predicted = one_step_expansion(&before.b, &before.a, grad_w, eta)?;
    let update_norm_sq = linalg::frobenius_norm_sq(&observed);
    let gap = linalg::frobenius_dist_sq(&observed, &predicted)?.sqrt();
    let scale = update_norm_sq.sqrt();
    let expansion_rel_error = if scale > 0.0 { gap / scale } else { gap };
    Ok(StepAudit {
        client,
        step,
        layer,
        eta,
        update_norm_sq,
        expansion_rel_error,
        grad_w_norm: linalg::frobenius_norm(grad_w),
        a_norm: linalg::frobenius_norm(&before.a),
        b_norm: linalg::frobenius_norm(&before.b),
    })
}

/// Operands of the per-step update bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub update_norm_sq: f64,
    pub eta: f64,
    pub g_hat: f64,
    pub c_a_hat: f64,
    pub c_b_hat: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub bound: f64,
    /// `bound − lhs`; negative means violated.
    pub slack: f64,
}

pub fn lemma2_bound(eta: f64, g: f64, c_a: f64, c_b: f64) -> f64 {
    3.0 * eta.powi(4) * c_a * c_a * c_b * c_b * g.powi(4)
        + 3.0 * eta * eta * c_a.powi(4) * g * g
        + 3.0 * eta * eta * c_b.powi(4) * g * g
}

/// `‖U − W‖² ≤ 3η⁴C_A²C_B²G⁴ + 3η²C_A⁴G² + 3η²C_B⁴G²`.
pub fn check_lemma2_bound(rec: &StepRecord) -> Result<BoundCheck> {
    let bound = lemma2_bound(rec.eta, rec.g_hat, rec.c_a_hat, rec.c_b_hat);
    let check = BoundCheck {
        lhs: rec.update_norm_sq,
        bound,
        slack: bound - rec.update_norm_sq,
    };
    if check.slack < 0.0 || !check.lhs.is_finite() {
        return Err(Error::BoundViolation(format!(
            "update norm² {:e} exceeds bound {:e} (slack {:e}; eta {}, G {:e}, C_A {:e}, C_B {:e})",
            rec.update_norm_sq, bound, check.slack, rec.eta, rec.g_hat, rec.c_a_hat, rec.c_b_hat
        )));
    }
    Ok(check)
}

/// Turns audits (in execution order) into bound records with per-layer running maxima.
pub fn lemma2_records(audits: &[StepAudit], running: &mut ConstantEstimates) -> Vec<StepRecord> {
    audits
        .iter()
        .map(|a| {
            running.observe(a.layer, a.grad_w_norm, a.a_norm, a.b_norm);
            let c = running.per_layer[a.layer];
            StepRecord {
                update_norm_sq: a.update_norm_sq,
                eta: a.eta,
                g_hat: c.g,
                c_a_hat: c.c_a,
                c_b_hat: c.c_b,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub weak_residual: f64,
    pub strong_residual_p: f64,
    pub strong_residual_q: f64,
    pub broadcast_error: f64,
    pub constants: LayerConstants,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub weak_residual: f64,
    pub strong_residual_p: f64,
    pub strong_residual_q: f64,
    pub broadcast_error: f64,
    pub local_grad_metric: f64,
    pub global_grad_metric: f64,
    pub g_hat: f64,
    pub c_a_hat: f64,
    pub c_b_hat: f64,
    pub theoretical_r2_weak: f64,
    pub theoretical_p2: f64,
    pub theoretical_q2: f64,
    pub theoretical_q2_proof: f64,
    pub theoretical_r2_strong: f64,
    pub local_steps: usize,
    pub layers: Vec<LayerMetrics>,
}

impl RoundMetrics {
    pub const CSV_HEADER: [&'static str; 15] = [
        "round",
        "train_loss",
        "test_accuracy",
        "weak_residual",
        "strong_residual_P",
        "strong_residual_Q",
        "broadcast_error",
        "local_grad_metric",
        "global_grad_metric",
        "G_hat",
        "C_A_hat",
        "C_B_hat",
        "theoretical_R2_weak",
        "theoretical_P2",
        "theoretical_Q2",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        let mut out = vec![self.round.to_string()];
        out.extend(
            [
                self.train_loss,
                self.test_accuracy,
                self.weak_residual,
                self.strong_residual_p,
                self.strong_residual_q,
                self.broadcast_error,
                self.local_grad_metric,
                self.global_grad_metric,
                self.g_hat,
                self.c_a_hat,
                self.c_b_hat,
                self.theoretical_r2_weak,
                self.theoretical_p2,
                self.theoretical_q2,
            ]
            .iter()
            .map(|v| format!("{v:e}")),
        );
        out
    }
}

/// Fixed per-client evaluation batches.
pub fn eval_batches(clients: &[ClientState], train: &Dataset) -> Vec<(Matrix, Vec<u8>)> {
    clients.iter().map(|c| train.gather(&c.eval_indices)).collect()
}

/// Everything measured at the end of one round. `clients` hold the installed
/// broadcast; `outcome` carries the pre-broadcast snapshots.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_round(
    round: usize,
    outcome: &RoundOutcome,
    clients: &[ClientState],
    train: &Dataset,
    test: &Dataset,
    constants: &mut ConstantEstimates,
    local_epochs: f64,
    eta: f64,
    with_grad_metrics: bool,
) -> Result<RoundMetrics> {
    let pre = outcome.pre_broadcast_refs();
    let weak = weak_residual_layers(&pre, &outcome.abo)?;
    let strong = strong_residual_layers(&pre, &outcome.abo)?;
    let bcast = broadcast_error_layers(&outcome.abo)?;
    constants.absorb(outcome);
    let global = &clients[0].model;
    let (local_grad_metric, global_grad_metric) = if with_grad_metrics {
        grad_metrics(&pre, global, &eval_batches(clients, train))?
    } else {
        (f64::NAN, f64::NAN)
    };
    let cor = corollary_constants(constants, local_epochs, eta);
    let layers = (0..weak.len())
        .map(|l| LayerMetrics {
            weak_residual: weak[l],
            strong_residual_p: strong[l].0,
            strong_residual_q: strong[l].1,
            broadcast_error: bcast[l],
            constants: constants.per_layer[l],
        })
        .collect();
    Ok(RoundMetrics {
        round,
        train_loss: outcome.mean_train_loss(),
        test_accuracy: global.accuracy(&test.images, &test.labels)?,
        weak_residual: weak.iter().sum(),
        strong_residual_p: strong.iter().map(|s| s.0).sum(),
        strong_residual_q: strong.iter().map(|s| s.1).sum(),
        broadcast_error: bcast.iter().sum(),
        local_grad_metric,
        global_grad_metric,
        g_hat: constants.g_hat(),
        c_a_hat: constants.c_a_hat(),
        c_b_hat: constants.c_b_hat(),
        theoretical_r2_weak: cor.r2_weak,
        theoretical_p2: cor.p2,
        theoretical_q2: cor.q2,
        theoretical_q2_proof: cor.q2_proof,
        theoretical_r2_strong: cor.r2_strong,
        local_steps: outcome.stats.iter().map(|s| s.steps).sum(),
        layers,
    })
}
