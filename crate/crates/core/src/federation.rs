//! Clients, the local-update schedule and the aggregation-broadcast operators.
//!
//! An aggregation-broadcast operator maps every client's LoRA factors after
//! local training to the single factor pair installed on all clients. Two
//! instances are provided:
//!
//! * [`SumProduct`] averages the products `B_i A_i` and re-factors the mean
//!   with a rank-r truncated SVD.
//! * [`ProductSum`] averages `B_i` and `A_i` separately.
//!
//! Both weight clients uniformly by `1/m` and average biases outside the
//! factor machinery. New operators plug in through [`AggregationBroadcast`].

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{self, Dataset, Shard};
use crate::diagnostics::{self, ConstantEstimates, RoundMetrics, StepAudit};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::lora_model::{GradDetail, LoraMlp};

/// Samples per client in the fixed gradient-metric evaluation batch.
pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AboKind {
    Sp,
    Ps,
}

impl AboKind {
    pub const ALL: [AboKind; 2] = [AboKind::Sp, AboKind::Ps];

    pub fn operator(self) -> Box<dyn AggregationBroadcast> {
        match self {
            AboKind::Sp => Box::new(SumProduct),
            AboKind::Ps => Box::new(ProductSum),
        }
    }
}

impl fmt::Display for AboKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AboKind::Sp => "sp",
            AboKind::Ps => "ps",
        })
    }
}

impl FromStr for AboKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sp" => Ok(AboKind::Sp),
            "ps" => Ok(AboKind::Ps),
            other => Err(Error::Config(format!("unknown aggregation operator `{other}` (expected sp or ps)"))),
        }
    }
}

/// Broadcast factors for one layer plus what the diagnostics need.
#[derive(Clone, Debug)]
pub struct LayerBroadcast {
    pub b_star: Matrix,
    pub a_star: Matrix,
    pub bias_star: Vec<f64>,
    /// `(1/m) Σ B_i A_i`, the aggregate before any broadcast constraint.
    pub delta_w_full: Matrix,
    /// `b_star · a_star`
    pub broadcast_product: Matrix,
    /// Singular values of `delta_w_full` when the operator computed them.
    pub singular_values: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct AboResult {
    pub layers: Vec<LayerBroadcast>,
}

pub trait AggregationBroadcast: Send + Sync {
    fn name(&self) -> &'static str;

    /// Computes the factors every client receives. `models` are the
    /// post-local-update replicas in client-id order.
    fn aggregate(&self, models: &[&LoraMlp]) -> Result<AboResult>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SumProduct;

#[derive(Clone, Copy, Debug, Default)]
pub struct ProductSum;

fn check_homogeneous(models: &[&LoraMlp]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::Contract("aggregation over zero clients".into()))?;
    for (i, m) in models.iter().enumerate().skip(1) {
        if m.layers.len() != first.layers.len() {
            return Err(Error::Unsupported(format!("client {i} has a different layer count")));
        }
        for (l, (x, y)) in m.layers.iter().zip(&first.layers).enumerate() {
            if x.b.shape() != y.b.shape() || x.a.shape() != y.a.shape() {
                return Err(Error::Unsupported(format!(
                    "client {i} layer {l}: factors {:?}/{:?} differ from {:?}/{:?} (heterogeneous ranks)",
                    x.b.shape(),
                    x.a.shape(),
                    y.b.shape(),
                    y.a.shape()
                )));
            }
        }
    }
    Ok(())
}

fn mean_bias(models: &[&LoraMlp], layer: usize) -> Vec<f64> {
    let d = models[0].layers[layer].bias.len();
    let mut out = vec![0.0; d];
    for m in models {
        for (o, b) in out.iter_mut().zip(&m.layers[layer].bias) {
            *o += b;
        }
    }
    let inv = 1.0 / models.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

fn mean_product(models: &[&LoraMlp], layer: usize) -> Result<Matrix> {
    let (d, n) = models[0].layers[layer].w0().shape();
    let mut acc = Matrix::zeros(d, n);
    for m in models {
        let l = &m.layers[layer];
        linalg::gemm(1.0, &l.b, linalg::Op::N, &l.a, linalg::Op::N, 1.0, &mut acc)?;
    }
    Ok(acc.scale(1.0 / models.len() as f64))
}

impl AggregationBroadcast for SumProduct {
    fn name(&self) -> &'static str {
        "sp"
    }

    fn aggregate(&self, models: &[&LoraMlp]) -> Result<AboResult> {
        check_homogeneous(models)?;
        let mut layers = Vec::with_capacity(models[0].layers.len());
        for l in 0..models[0].layers.len() {
            let rank = models[0].layers[l].rank();
            let delta_w_full = mean_product(models, l)?;
            let svd = linalg::svd(&delta_w_full)?;
            let (b_star, a_star) = linalg::truncate_svd(&svd, rank)?;
            let broadcast_product = linalg::matmul(&b_star, &a_star)?;
            layers.push(LayerBroadcast {
                b_star,
                a_star,
                bias_star: mean_bias(models, l),
                delta_w_full,
                broadcast_product,
                singular_values: Some(svd.sigma),
            });
        }
        Ok(AboResult { layers })
    }
}

impl AggregationBroadcast for ProductSum {
    fn name(&self) -> &'static str {
        "ps"
    }

    fn aggregate(&self, models: &[&LoraMlp]) -> Result<AboResult> {
        check_homogeneous(models)?;
        let mut layers = Vec::with_capacity(models[0].layers.len());
        for l in 0..models[0].layers.len() {
            let b_star = Matrix::mean_of(models.iter().map(|m| &m.layers[l].b))?;
            let a_star = Matrix::mean_of(models.iter().map(|m| &m.layers[l].a))?;
            let broadcast_product = linalg::matmul(&b_star, &a_star)?;
            layers.push(LayerBroadcast {
                b_star,
                a_star,
                bias_star: mean_bias(models, l),
                delta_w_full: mean_product(models, l)?,
                broadcast_product,
                singular_values: None,
            });
        }
        Ok(AboResult { layers })
    }
}

/// How much local work a client does between synchronisations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalSchedule {
    /// Full passes over the client's shard.
    Epochs(usize),
    /// Individual SGD steps; batches continue across round boundaries.
    Steps(usize),
}

impl LocalSchedule {
    pub fn count(self) -> usize {
        match self {
            LocalSchedule::Epochs(n) | LocalSchedule::Steps(n) => n,
        }
    }
}

pub struct ClientState {
    pub id: usize,
    pub model: LoraMlp,
    pub shard: Shard,
    rng: ChaCha8Rng,
    pending: VecDeque<Vec<usize>>,
    /// Total SGD steps taken.
    pub steps: u64,
    /// Fixed indices used for gradient metrics.
    pub eval_indices: Vec<usize>,
}

impl ClientState {
    /// Training randomness comes from stream `id + 1` of the master seed;
    /// the evaluation batch from an unrelated stream so it never shifts training.
    pub fn new(id: usize, model: LoraMlp, shard: Shard, master_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(id as u64 + 1);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(master_seed);
        eval_rng.set_stream((1u64 << 32) + id as u64);
        let take = EVAL_BATCH.min(shard.len());
        let mut eval_indices: Vec<usize> = index::sample(&mut eval_rng, shard.len(), take)
            .into_iter()
            .map(|i| shard.indices[i])
            .collect();
        eval_indices.sort_unstable();
        ClientState {
            id,
            model,
            shard,
            rng,
            pending: VecDeque::new(),
            steps: 0,
            eval_indices,
        }
    }

    fn next_batch(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if self.pending.is_empty() {
            self.pending = data::epoch_batches(&self.shard, batch_size, &mut self.rng)?.into();
        }
        Ok(self.pending.pop_front().expect("refilled above"))
    }
}

/// What one client observed during its local phase.
#[derive(Clone, Debug, Default)]
pub struct ClientRoundStats {
    pub client: usize,
    pub steps: usize,
    pub loss_sum: f64,
    /// Per layer: max `‖∇_W L‖_F`, `‖A‖_F`, `‖B‖_F` seen this round.
    pub max_grad_w: Vec<f64>,
    pub max_a: Vec<f64>,
    pub max_b: Vec<f64>,
    /// Per-step records when auditing is enabled.
    pub audits: Vec<StepAudit>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RoundOptions {
    /// Record `‖U − W‖²` and check the one-step expansion on every step (slow).
    pub audit_steps: bool,
    /// Run client local phases on the rayon pool.
    pub parallel: bool,
}

pub struct RoundOutcome {
    pub abo: AboResult,
    /// Client replicas right after local training, before installation.
    pub pre_broadcast: Vec<LoraMlp>,
    pub stats: Vec<ClientRoundStats>,
}

impl RoundOutcome {
    pub fn mean_train_loss(&self) -> f64 {
        let steps: usize = self.stats.iter().map(|s| s.steps).sum();
        let loss: f64 = self.stats.iter().map(|s| s.loss_sum).sum();
        if steps == 0 {
            0.0
        } else {
            loss / steps as f64
        }
    }

    pub fn pre_broadcast_refs(&self) -> Vec<&LoraMlp> {
        self.pre_broadcast.iter().collect()
    }
}

fn observe_norms(model: &LoraMlp, stats: &mut ClientRoundStats) {
    for (l, layer) in model.layers.iter().enumerate() {
        stats.max_a[l] = stats.max_a[l].max(linalg::frobenius_norm(&layer.a));
        stats.max_b[l] = stats.max_b[l].max(linalg::frobenius_norm(&layer.b));
    }
}

fn local_train(
    client: &mut ClientState,
    train: &Dataset,
    eta: f64,
    schedule: LocalSchedule,
    batch_size: usize,
    audit: bool,
) -> Result<ClientRoundStats> {
    let layers = client.model.layers.len();
    let mut stats = ClientRoundStats {
        client: client.id,
        max_grad_w: vec![0.0; layers],
        max_a: vec![0.0; layers],
        max_b: vec![0.0; layers],
        ..Default::default()
    };
    let plan: Vec<Vec<usize>> = match schedule {
        LocalSchedule::Epochs(e) => {
            // Epoch mode always starts from a fresh shuffle.
            client.pending.clear();
            let mut all = Vec::new();
            for _ in 0..e {
                all.extend(data::epoch_batches(&client.shard, batch_size, &mut client.rng)?);
            }
            all
        }
        LocalSchedule::Steps(s) => (0..s).map(|_| client.next_batch(batch_size)).collect::<Result<_>>()?,
    };
    let detail = if audit { GradDetail::Full } else { GradDetail::WeightNorms };
    for idx in plan {
        let (x, y) = train.gather(&idx);
        let (loss, grads) = client.model.loss_and_grads_with(&x, &y, detail)?;
        observe_norms(&client.model, &mut stats);
        for (l, g) in grads.layers.iter().enumerate() {
            let gw = g.grad_w_norm_sq.unwrap_or(0.0).sqrt();
            stats.max_grad_w[l] = stats.max_grad_w[l].max(gw);
        }
        let before = audit.then(|| client.model.clone());
        client.model.sgd_step(&grads, eta)?;
        if let Some(before) = before {
            for (l, g) in grads.layers.iter().enumerate() {
                stats.audits.push(diagnostics::audit_step(
                    client.id,
                    client.steps,
                    l,
                    eta,
                    &before.layers[l],
                    &client.model.layers[l],
                    g,
                )?);
            }
        }
        stats.loss_sum += loss;
        stats.steps += 1;
        client.steps += 1;
    }
    observe_norms(&client.model, &mut stats);
    Ok(stats)
}

/// Writes the broadcast factors into every client.
pub fn install(result: &AboResult, clients: &mut [ClientState]) -> Result<()> {
    for c in clients.iter_mut() {
        if c.model.layers.len() != result.layers.len() {
            return Err(Error::Contract("broadcast does not match the client network".into()));
        }
        for (layer, bc) in c.model.layers.iter_mut().zip(&result.layers) {
            if layer.b.shape() != bc.b_star.shape() || layer.a.shape() != bc.a_star.shape() {
                return Err(Error::Unsupported("broadcast factor shape differs from client rank".into()));
            }
            layer.b = bc.b_star.clone();
            layer.a = bc.a_star.clone();
            layer.bias = bc.bias_star.clone();
        }
    }
    Ok(())
}

fn models(clients: &[ClientState]) -> Vec<&LoraMlp> {
    clients.iter().map(|c| &c.model).collect()
}

/// Runs the SP operator on the clients' current replicas and installs the result.
pub fn sp_aggregate_broadcast(clients: &mut [ClientState]) -> Result<AboResult> {
    let result = SumProduct.aggregate(&models(clients))?;
    install(&result, clients)?;
    Ok(result)
}

/// Runs the PS operator on the clients' current replicas and installs the result.
pub fn ps_aggregate_broadcast(clients: &mut [ClientState]) -> Result<AboResult> {
    let result = ProductSum.aggregate(&models(clients))?;
    install(&result, clients)?;
    Ok(result)
}

/// One communication round: local training on every client, then the
/// operator at the synchronisation barrier, then installation.
pub fn run_round(
    clients: &mut [ClientState],
    operator: &dyn AggregationBroadcast,
    train: &Dataset,
    eta: f64,
    schedule: LocalSchedule,
    batch_size: usize,
    options: RoundOptions,
) -> Result<RoundOutcome> {
    if schedule.count() == 0 {
        return Err(Error::Config("local work per round must be at least 1".into()));
    }
    if clients.is_empty() {
        return Err(Error::Contract("round with zero clients".into()));
    }
    let work = |c: &mut ClientState| local_train(c, train, eta, schedule, batch_size, options.audit_steps);
    let stats: Vec<ClientRoundStats> = if options.parallel {
        clients.par_iter_mut().map(work).collect::<Result<_>>()?
    } else {
        clients.iter_mut().map(work).collect::<Result<_>>()?
    };
    let pre_broadcast: Vec<LoraMlp> = clients.iter().map(|c| c.model.clone()).collect();
    let abo = operator.aggregate(&pre_broadcast.iter().collect::<Vec<_>>())?;
    install(&abo, clients)?;
    Ok(RoundOutcome {
        abo,
        pre_broadcast,
        stats,
    })
}

/// Client replicas of one shared initial model, one per shard.
pub fn setup_clients(model: &LoraMlp, shards: Vec<Shard>, master_seed: u64) -> Vec<ClientState> {
    shards
        .into_iter()
        .enumerate()
        .map(|(i, shard)| ClientState::new(i, model.clone(), shard, master_seed))
        .collect()
}

/// Optional observer for per-round progress.
pub trait RoundObserver {
    fn on_round(&mut self, metrics: &RoundMetrics, outcome: &RoundOutcome);
}

impl RoundObserver for () {
    fn on_round(&mut self, _: &RoundMetrics, _: &RoundOutcome) {}
}

/// Executes a whole experiment and returns one metrics record per round.
pub fn run_experiment(config: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Vec<RoundMetrics>> {
    run_experiment_observed(config, train, test, &mut ())
}

pub fn run_experiment_observed(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    observer: &mut dyn RoundObserver,
) -> Result<Vec<RoundMetrics>> {
    config.validate()?;
    let rounds = config.round_count()?;
    let model = LoraMlp::build(config.delta, config.seed)?;
    let mut shards = data::partition_by_label(train, config.clients)?;
    if let Some(cap) = config.per_client_cap {
        shards = shards.iter().map(|s| s.truncated(cap)).collect();
    }
    let test = match config.test_limit {
        Some(n) => test.head(n),
        None => test.clone(),
    };
    let mut clients = setup_clients(&model, shards, config.seed);
    let operator = config.abo.operator();
    let options = RoundOptions {
        audit_steps: false,
        parallel: config.parallel,
    };
    let mut constants = ConstantEstimates::new(model.layers.len());
    let mut history = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let outcome = run_round(
            &mut clients,
            operator.as_ref(),
            train,
            config.eta,
            config.schedule(),
            config.batch_size,
            options,
        )?;
        let metrics = diagnostics::evaluate_round(
            round,
            &outcome,
            &clients,
            train,
            &test,
            &mut constants,
            config.local_epochs as f64,
            config.eta,
            config.grad_metrics,
        )?;
        log::info!(
            "{} delta={} round {round}/{rounds}: loss {:.4} acc {:.4}",
            config.abo,
            config.delta,
            metrics.train_loss,
            metrics.test_accuracy
        );
        observer.on_round(&metrics, &outcome);
        history.push(metrics);
    }
    Ok(history)
}
