//! MLP whose dense layers are a frozen base weight plus a trainable
//! low-rank product, `W = W0 + B·A`.
//!
//! Gradients are produced directly in factored form: for a layer with input
//! `h` and output sensitivity `dZ`, `∇_B = dZᵀ(h Aᵀ)` and `∇_A = (dZ B)ᵀ h`,
//! which equal `∇_W Aᵀ` and `Bᵀ ∇_W` without forming `∇_W = dZᵀ h`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, gemm, matmul, Matrix, Op};

pub const INPUT_DIM: usize = 784;
pub const HIDDEN_DIM: usize = 200;
pub const NUM_CLASSES: usize = 10;
/// Per-layer ranks at a rank ratio of 1.
pub const BASE_RANKS: [usize; 3] = [160, 100, 10];
/// Standard deviation of the initial `A` factor.
pub const A_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub rank: usize,
    pub activation: Activation,
}

/// `max(round(base * delta), 1)`, capped by the layer's full rank.
pub fn scaled_rank(base: usize, delta: f64, full: usize) -> usize {
    ((base as f64 * delta).round() as usize).max(1).min(full)
}

/// Layer shapes of the 784→200→200→10 network at rank ratio `delta`.
pub fn mnist_architecture(delta: f64) -> Vec<LayerSpec> {
    let dims = [(INPUT_DIM, HIDDEN_DIM), (HIDDEN_DIM, HIDDEN_DIM), (HIDDEN_DIM, NUM_CLASSES)];
    dims.iter()
        .zip(BASE_RANKS)
        .enumerate()
        .map(|(i, (&(inputs, outputs), base))| LayerSpec {
            inputs,
            outputs,
            rank: scaled_rank(base, delta, inputs.min(outputs)),
            activation: if i + 1 == dims.len() { Activation::Softmax } else { Activation::Relu },
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LoraLayer {
    w0: Arc<Matrix>,
    /// d×r
    pub b: Matrix,
    /// r×n
    pub a: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl LoraLayer {
    pub fn new(w0: Arc<Matrix>, b: Matrix, a: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let (d, n) = w0.shape();
        let r = b.cols();
        if b.rows() != d || a.shape() != (r, n) || bias.len() != d {
            return Err(Error::Contract(format!(
                "inconsistent layer: w0 {d}x{n}, b {:?}, a {:?}, bias {}",
                b.shape(),
                a.shape(),
                bias.len()
            )));
        }
        if r == 0 || r > d.min(n) {
            return Err(Error::Contract(format!("rank {r} outside 1..={}", d.min(n))));
        }
        Ok(LoraLayer { w0, b, a, bias, activation })
    }

    /// The frozen base weight (d×n).
    pub fn w0(&self) -> &Arc<Matrix> {
        &self.w0
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn inputs(&self) -> usize {
        self.w0.cols()
    }

    pub fn outputs(&self) -> usize {
        self.w0.rows()
    }

    /// `B·A`
    pub fn delta_w(&self) -> Matrix {
        matmul(&self.b, &self.a).expect("factor shapes are validated at construction")
    }

    /// `W0 + B·A`
    pub fn effective_weight(&self) -> Matrix {
        let mut w = (*self.w0).clone();
        gemm(1.0, &self.b, Op::N, &self.a, Op::N, 1.0, &mut w).expect("validated shapes");
        w
    }

    pub fn trainable_params(&self) -> usize {
        self.b.rows() * self.b.cols() + self.a.rows() * self.a.cols() + self.bias.len()
    }
}

#[derive(Clone, Debug)]
pub struct LoraMlp {
    pub layers: Vec<LoraLayer>,
    delta: f64,
}

/// How much of the weight-space gradient to materialise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradDetail {
    /// Factor and bias gradients only.
    Factors,
    /// Also `‖∇_W‖_F²`, computed from batch Gram matrices.
    WeightNorms,
    /// Also the full `∇_W` matrix.
    Full,
}

#[derive(Clone, Debug)]
pub struct LayerGrad {
    pub grad_b: Matrix,
    pub grad_a: Matrix,
    pub grad_bias: Vec<f64>,
    pub grad_w: Option<Matrix>,
    pub grad_w_norm_sq: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    /// `Σ_layers ‖∇_B‖² + ‖∇_A‖²` (biases excluded).
    pub fn factor_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|g| linalg::frobenius_norm_sq(&g.grad_b) + linalg::frobenius_norm_sq(&g.grad_a))
            .sum()
    }
}

/// Activations kept by the forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the batch).
    pub inputs: Vec<Matrix>,
    /// `input · Aᵀ` per layer.
    pub projected: Vec<Matrix>,
    /// Pre-activations per layer.
    pub pre_activations: Vec<Matrix>,
}

impl LoraMlp {
    /// The rank-scaled MNIST network. `W0` is uniform in `±sqrt(6/(d+n))`,
    /// `A ~ N(0, 0.01²)`, `B = 0` and biases are zero.
    pub fn build(delta: f64, seed: u64) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::Config(format!("rank ratio {delta} outside (0, 1]")));
        }
        let mut model = Self::with_architecture(&mnist_architecture(delta), seed)?;
        model.delta = delta;
        Ok(model)
    }

    pub fn with_architecture(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Contract("network needs at least one layer".into()));
        }
        for pair in specs.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Contract(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, A_INIT_STD).expect("valid std");
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let (d, n, r) = (spec.outputs, spec.inputs, spec.rank);
            let limit = (6.0 / (d + n) as f64).sqrt();
            let w0 = Matrix::from_fn(d, n, |_, _| rng.random_range(-limit..limit));
            let a = Matrix::from_fn(r, n, |_, _| normal.sample(&mut rng));
            layers.push(LoraLayer::new(Arc::new(w0), Matrix::zeros(d, r), a, vec![0.0; d], spec.activation)?);
        }
        Ok(LoraMlp { layers, delta: 1.0 })
    }

    pub fn from_layers(layers: Vec<LoraLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("network needs at least one layer".into()));
        }
        Ok(LoraMlp { layers, delta: 1.0 })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(LoraLayer::rank).collect()
    }

    pub fn trainable_params(&self) -> usize {
        self.layers.iter().map(LoraLayer::trainable_params).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: batch.shape(),
                right: (batch.rows(), self.input_dim()),
            });
        }
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            projected: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
        };
        let mut h = batch.clone();
        for layer in &self.layers {
            let n = h.rows();
            let mut z = Matrix::zeros(n, layer.outputs());
            gemm(1.0, &h, Op::N, &layer.w0, Op::T, 0.0, &mut z)?;
            let mut xa = Matrix::zeros(n, layer.rank());
            gemm(1.0, &h, Op::N, &layer.a, Op::T, 0.0, &mut xa)?;
            gemm(1.0, &xa, Op::N, &layer.b, Op::T, 1.0, &mut z)?;
            add_bias(&mut z, &layer.bias);
            let out = activate(&z, layer.activation);
            cache.inputs.push(h);
            cache.projected.push(xa);
            cache.pre_activations.push(z);
            h = out;
        }
        Ok((h, cache))
    }

    /// Class probabilities using merged weights; cheaper for large evaluation sets.
    pub fn predict_proba(&self, batch: &Matrix) -> Result<Matrix> {
        let merged: Vec<Matrix> = self.layers.iter().map(LoraLayer::effective_weight).collect();
        self.predict_with(&merged, batch)
    }

    fn predict_with(&self, merged: &[Matrix], batch: &Matrix) -> Result<Matrix> {
        let mut h = batch.clone();
        for (layer, w) in self.layers.iter().zip(merged) {
            let mut z = Matrix::zeros(h.rows(), layer.outputs());
            gemm(1.0, &h, Op::N, w, Op::T, 0.0, &mut z)?;
            add_bias(&mut z, &layer.bias);
            h = activate(&z, layer.activation);
        }
        Ok(h)
    }

    /// Fraction of rows whose arg-max class equals the label.
    pub fn accuracy(&self, images: &Matrix, labels: &[u8]) -> Result<f64> {
        if images.rows() != labels.len() {
            return Err(Error::Contract("image/label count mismatch".into()));
        }
        if labels.is_empty() {
            return Ok(0.0);
        }
        let merged: Vec<Matrix> = self.layers.iter().map(LoraLayer::effective_weight).collect();
        let chunk = 1000;
        let mut correct = 0usize;
        let mut start = 0;
        while start < labels.len() {
            let end = (start + chunk).min(labels.len());
            let rows: Vec<f64> = images.as_slice()[start * images.cols()..end * images.cols()].to_vec();
            let block = Matrix::from_vec(end - start, images.cols(), rows)?;
            let probs = self.predict_with(&merged, &block)?;
            for (i, &label) in labels[start..end].iter().enumerate() {
                if argmax(probs.row(i)) == label as usize {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Mean softmax cross-entropy and its gradients, including `∇_W`.
    pub fn loss_and_grads(&self, batch: &Matrix, labels: &[u8]) -> Result<(f64, GradientSet)> {
        self.loss_and_grads_with(batch, labels, GradDetail::Full)
    }

    pub fn loss_and_grads_with(&self, batch: &Matrix, labels: &[u8], detail: GradDetail) -> Result<(f64, GradientSet)> {
        if labels.is_empty() || batch.rows() == 0 {
            return Err(Error::Contract("loss of an empty batch".into()));
        }
        if batch.rows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} inputs but {} labels",
                batch.rows(),
                labels.len()
            )));
        }
        let classes = self.output_dim();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Contract(format!("label {bad} outside 0..{classes}")));
        }
        let last = self.layers.last().expect("non-empty");
        if last.activation != Activation::Softmax {
            return Err(Error::Contract("cross-entropy needs a softmax output layer".into()));
        }

        let (probs, cache) = self.forward(batch)?;
        let n = labels.len();
        let inv_n = 1.0 / n as f64;
        let logits = cache.pre_activations.last().expect("non-empty");
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[label as usize];
        }
        loss *= inv_n;

        // d loss / d logits = (p - onehot) / n
        let mut dz = probs;
        for (i, &label) in labels.iter().enumerate() {
            dz[(i, label as usize)] -= 1.0;
        }
        dz.as_mut_slice().iter_mut().for_each(|v| *v *= inv_n);

        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let h = &cache.inputs[l];
            let grad_b = linalg::matmul_tn(&dz, &cache.projected[l])?;
            let zb = matmul(&dz, &layer.b)?;
            let grad_a = linalg::matmul_tn(&zb, h)?;
            let mut grad_bias = vec![0.0; layer.outputs()];
            for i in 0..n {
                for (g, v) in grad_bias.iter_mut().zip(dz.row(i)) {
                    *g += v;
                }
            }
            let (grad_w, grad_w_norm_sq) = match detail {
                GradDetail::Factors => (None, None),
                GradDetail::WeightNorms => (None, Some(gram_norm_sq(&dz, h)?)),
                GradDetail::Full => {
                    let gw = linalg::matmul_tn(&dz, h)?;
                    let norm = linalg::frobenius_norm_sq(&gw);
                    (Some(gw), Some(norm))
                }
            };
            if l > 0 {
                let mut dh = Matrix::zeros(n, layer.inputs());
                gemm(1.0, &dz, Op::N, &layer.w0, Op::N, 0.0, &mut dh)?;
                gemm(1.0, &zb, Op::N, &layer.a, Op::N, 1.0, &mut dh)?;
                let prev = &cache.pre_activations[l - 1];
                match self.layers[l - 1].activation {
                    Activation::Relu => {
                        for (g, z) in dh.as_mut_slice().iter_mut().zip(prev.as_slice()) {
                            if *z <= 0.0 {
                                *g = 0.0;
                            }
                        }
                    }
                    Activation::Softmax => {
                        return Err(Error::Unsupported("softmax on a hidden layer".into()));
                    }
                }
                dz = dh;
            }
            grads.push(LayerGrad {
                grad_b,
                grad_a,
                grad_bias,
                grad_w,
                grad_w_norm_sq,
            });
        }
        grads.reverse();
        Ok((loss, GradientSet { layers: grads }))
    }

    /// Simultaneous plain SGD on `B`, `A` and the biases; `W0` is untouched.
    pub fn sgd_step(&mut self, grads: &GradientSet, eta: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Contract("gradient set does not match the network".into()));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.b.axpy(-eta, &g.grad_b)?;
            layer.a.axpy(-eta, &g.grad_a)?;
            if g.grad_bias.len() != layer.bias.len() {
                return Err(Error::Contract("bias gradient length mismatch".into()));
            }
            for (p, d) in layer.bias.iter_mut().zip(&g.grad_bias) {
                *p -= eta * d;
            }
        }
        Ok(())
    }
}

/// `‖dZᵀ h‖_F² = ⟨dZ dZᵀ, h hᵀ⟩_F`, cheaper than forming the product when the batch is small.
fn gram_norm_sq(dz: &Matrix, h: &Matrix) -> Result<f64> {
    let gz = linalg::matmul_nt(dz, dz)?;
    let gh = linalg::matmul_nt(h, h)?;
    Ok(linalg::frobenius_inner(&gz, &gh)?.max(0.0))
}

fn add_bias(z: &mut Matrix, bias: &[f64]) {
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn activate(z: &Matrix, activation: Activation) -> Matrix {
    let mut out = z.clone();
    match activation {
        Activation::Relu => out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Softmax => {
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
    }
    out
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
