//! Predictors (MLP demodulator, linear soft equalizer), the Gaussian
//! mean-field variational family and its prior, closed-form KL, reparametrized
//! sampling and ensemble prediction.

use autodiff::{logsumexp, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::channel::{Constellation, ConstellationKind, Sample};
use crate::error::{Error, Result};

/// Bounds applied to log standard deviations.
pub const RHO_MIN: f64 = -30.0;
pub const RHO_MAX: f64 = 5.0;

pub fn clamp_rho(r: f64) -> f64 {
    r.clamp(RHO_MIN, RHO_MAX)
}

/// Layer widths of a fully connected ReLU network with a linear last layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub widths: Vec<usize>,
}

impl MlpShape {
    /// Input 2, hidden 10/30/30 with ReLU, 16 logits.
    pub fn demodulator() -> Self {
        Self {
            widths: vec![2, 10, 30, 30, 16],
        }
    }

    /// Weight matrix `[in × out]` (row-major) then bias `[out]`, per layer.
    pub fn dim(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_outputs(&self) -> usize {
        *self.widths.last().expect("non-empty shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Demodulator(MlpShape),
    /// `x̂ = φᵀy` with Gaussian output noise of precision `beta`; D = 2.
    Equalizer {
        beta: f64,
    },
}

impl Model {
    pub fn demodulator() -> Self {
        Model::Demodulator(MlpShape::demodulator())
    }

    pub fn equalizer(beta: f64) -> Self {
        Model::Equalizer { beta }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Demodulator(s) => s.dim(),
            Model::Equalizer { .. } => 2,
        }
    }

    pub fn constellation(&self) -> Constellation {
        match self {
            Model::Demodulator(_) => Constellation::qam16(),
            Model::Equalizer { .. } => Constellation::pam4(),
        }
    }

    pub fn check_dim(&self, len: usize) -> Result<()> {
        if len == self.dim() {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected: self.dim(),
                got: len,
            })
        }
    }

    /// `(offset, rows, cols)` of each parameter block of the flat vector.
    pub fn blocks(&self) -> Vec<(usize, usize, usize)> {
        match self {
            Model::Demodulator(shape) => {
                let mut out = Vec::with_capacity(2 * shape.n_layers());
                let mut off = 0;
                for w in shape.widths.windows(2) {
                    out.push((off, w[0], w[1]));
                    off += w[0] * w[1];
                    out.push((off, 1, w[1]));
                    off += w[1];
                }
                out
            }
            Model::Equalizer { .. } => vec![(0, 2, 1)],
        }
    }

    /// Views of the parameter blocks of a flat `D × 1` node.
    pub fn split_graph(&self, g: &mut Graph, phi: Var) -> Vec<Var> {
        self.blocks()
            .into_iter()
            .map(|(off, r, c)| g.slice(phi, off, r, c))
            .collect()
    }

    /// Mean negative log-likelihood of `data` with parameters given as blocks.
    pub fn nll_blocks(&self, g: &mut Graph, blocks: &[Var], data: &GraphBatch) -> Var {
        match self {
            Model::Demodulator(_) => {
                let logits = mlp_logits_graph(g, blocks, data.inputs);
                let lse = g.logsumexp_rows(logits);
                let picked = g.pick_cols(logits, &data.labels);
                let nll = g.sub(lse, picked);
                g.mean(nll)
            }
            Model::Equalizer { beta } => {
                let pred = g.matmul(data.inputs, blocks[0]);
                let diff = g.sub(data.targets, pred);
                let sq = g.square(diff);
                let m = g.mean(sq);
                let s = g.scale(m, 0.5 * beta);
                g.offset(s, -equalizer_log_normaliser(*beta))
            }
        }
    }

    /// Mean negative log-likelihood of `data` at the flat parameter node `phi`.
    pub fn nll_graph(&self, g: &mut Graph, phi: Var, data: &GraphBatch) -> Var {
        let blocks = self.split_graph(g, phi);
        self.nll_blocks(g, &blocks, data)
    }

    /// Mean negative log-likelihood, evaluated directly.
    pub fn nll(&self, phi: &[f64], batch: &Batch) -> f64 {
        match self {
            Model::Demodulator(shape) => {
                let logits = mlp_logits_batch(shape, phi, &batch.inputs);
                let n = batch.len();
                (0..n)
                    .map(|i| {
                        let row = logits.row(i);
                        logsumexp(row) - row[batch.labels[i]]
                    })
                    .sum::<f64>()
                    / n as f64
            }
            Model::Equalizer { beta } => {
                let n = batch.len();
                (0..n)
                    .map(|i| {
                        let y = batch.inputs.row(i);
                        -equalizer_logdensity(batch.targets.get(i, 0), [y[0], y[1]], phi, *beta)
                    })
                    .sum::<f64>()
                    / n as f64
            }
        }
    }
}

/// Received samples with their labels, in the layout the predictors consume.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `N × 2` received samples.
    pub inputs: Tensor,
    /// Transmitted symbol indices.
    pub labels: Vec<usize>,
    /// `N × 1` real part of the transmitted symbols.
    pub targets: Tensor,
}

impl Batch {
    pub fn new(samples: &[Sample], constellation: &Constellation) -> Self {
        let n = samples.len();
        let inputs = Tensor::new(n, 2, samples.iter().flat_map(|s| s.y).collect());
        let labels = samples.iter().map(|s| s.x).collect();
        let targets = Tensor::new(
            n,
            1,
            samples
                .iter()
                .map(|s| constellation.point(s.x).re)
                .collect(),
        );
        Self {
            inputs,
            labels,
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Records the batch as constants on `g`.
    pub fn to_graph(&self, g: &mut Graph) -> GraphBatch {
        GraphBatch {
            inputs: g.constant(self.inputs.clone()),
            labels: self.labels.clone().into(),
            targets: g.constant(self.targets.clone()),
        }
    }
}

/// A [`Batch`] recorded on a graph.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub inputs: Var,
    pub labels: Arc<[usize]>,
    pub targets: Var,
}

/// Forward pass with blocks `[W₁, b₁, W₂, b₂, …]`.
fn mlp_logits_graph(g: &mut Graph, blocks: &[Var], x: Var) -> Var {
    let mut h = x;
    let layers = blocks.len() / 2;
    for l in 0..layers {
        let z = g.matmul(h, blocks[2 * l]);
        h = g.add_row(z, blocks[2 * l + 1]);
        if l + 1 < layers {
            h = g.relu(h);
        }
    }
    h
}

/// Logits for each row of an `N × 2` input matrix.
pub fn mlp_logits_batch(shape: &MlpShape, phi: &[f64], inputs: &Tensor) -> Tensor {
    assert_eq!(phi.len(), shape.dim(), "parameter vector has wrong length");
    let mut h = inputs.clone();
    let mut off = 0;
    let last = shape.n_layers() - 1;
    for (l, w) in shape.widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weight = Tensor::new(fan_in, fan_out, phi[off..off + fan_in * fan_out].to_vec());
        off += fan_in * fan_out;
        let bias = &phi[off..off + fan_out];
        off += fan_out;
        h = h.matmul(&weight);
        let relu = l < last;
        for r in 0..h.rows() {
            let row = &mut h.data_mut()[r * fan_out..(r + 1) * fan_out];
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
                if relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    h
}

pub fn mlp_logits(shape: &MlpShape, y: [f64; 2], phi: &[f64]) -> Vec<f64> {
    mlp_logits_batch(shape, phi, &Tensor::new(1, 2, y.to_vec())).into_data()
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

pub fn demod_probs(shape: &MlpShape, y: [f64; 2], phi: &[f64]) -> Vec<f64> {
    softmax(&mlp_logits(shape, y, phi))
}

/// `½ log(β / 2π)`.
pub fn equalizer_log_normaliser(beta: f64) -> f64 {
    0.5 * (beta / (2.0 * std::f64::consts::PI)).ln()
}

/// `log N(x | φᵀy, β⁻¹)`.
pub fn equalizer_logdensity(x: f64, y: [f64; 2], phi: &[f64], beta: f64) -> f64 {
    let mean = phi[0] * y[0] + phi[1] * y[1];
    equalizer_log_normaliser(beta) - 0.5 * beta * (x - mean).powi(2)
}

/// Gaussian mean-field distribution `N(ν, diag(exp(2ρ)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub nu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl VariationalParams {
    pub fn new(nu: Vec<f64>, rho: Vec<f64>) -> Self {
        assert_eq!(nu.len(), rho.len(), "ν and ρ must have equal length");
        Self { nu, rho }
    }

    pub fn isotropic(nu: Vec<f64>, rho: f64) -> Self {
        let rho = vec![rho; nu.len()];
        Self { nu, rho }
    }

    pub fn dim(&self) -> usize {
        self.nu.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| clamp_rho(r).exp()).collect()
    }

    /// `ν + exp(ρ) ⊙ e` for a given standard-normal draw `e`.
    pub fn reparametrize(&self, e: &[f64]) -> Vec<f64> {
        assert_eq!(e.len(), self.dim(), "noise draw has wrong length");
        self.nu
            .iter()
            .zip(&self.rho)
            .zip(e)
            .map(|((n, r), e)| n + clamp_rho(*r).exp() * e)
            .collect()
    }
}

/// Hyperparameters ξ shared across frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum Hyperparams {
    /// Initialization of gradient descent.
    Freq { init: Vec<f64> },
    /// Gaussian prior, also used to initialize the variational posterior.
    Bayes(VariationalParams),
}

impl Hyperparams {
    pub fn mode(&self) -> &'static str {
        match self {
            Hyperparams::Freq { .. } => "freq",
            Hyperparams::Bayes(_) => "bayes",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Hyperparams::Freq { init } => init.len(),
            Hyperparams::Bayes(q) => q.dim(),
        }
    }

    pub fn as_freq(&self) -> Result<&[f64]> {
        match self {
            Hyperparams::Freq { init } => Ok(init),
            other => Err(Error::ModeMismatch {
                expected: "freq",
                found: other.mode(),
            }),
        }
    }

    pub fn as_bayes(&self) -> Result<&VariationalParams> {
        match self {
            Hyperparams::Bayes(q) => Ok(q),
            other => Err(Error::ModeMismatch {
                expected: "bayes",
                found: other.mode(),
            }),
        }
    }

    /// Flat vector used for hashing and snapshots.
    pub fn flat(&self) -> Vec<f64> {
        match self {
            Hyperparams::Freq { init } => init.clone(),
            Hyperparams::Bayes(q) => q.nu.iter().chain(&q.rho).copied().collect(),
        }
    }
}

/// `KL(q ‖ p)` for diagonal Gaussians.
pub fn kl_gaussians(q: &VariationalParams, p: &VariationalParams) -> f64 {
    assert_eq!(
        q.dim(),
        p.dim(),
        "KL between distributions of different dimension"
    );
    let mut acc = 0.0;
    for d in 0..q.dim() {
        let (nq, rq) = (q.nu[d], q.rho[d]);
        let (np, rp) = (p.nu[d], p.rho[d]);
        acc += 2.0 * (rp - rq) + ((2.0 * rq).exp() + (nq - np).powi(2)) / (2.0 * rp).exp() - 1.0;
    }
    0.5 * acc
}

/// Graph version of [`kl_gaussians`]; all arguments are `D × 1` columns.
pub fn kl_graph(g: &mut Graph, nu_q: Var, rho_q: Var, nu_p: Var, rho_p: Var) -> Var {
    let dr = g.sub(rho_p, rho_q);
    let log_ratio = g.scale(dr, 2.0);
    let two_rq = g.scale(rho_q, 2.0);
    let var_q = g.exp(two_rq);
    let dn = g.sub(nu_q, nu_p);
    let dn2 = g.square(dn);
    let num = g.add(var_q, dn2);
    let m2rp = g.scale(rho_p, -2.0);
    let inv_var_p = g.exp(m2rp);
    let ratio = g.mul(num, inv_var_p);
    let terms = g.add(log_ratio, ratio);
    let terms = g.offset(terms, -1.0);
    let s = g.sum(terms);
    g.scale(s, 0.5)
}

/// Reparametrized samples `ν + exp(clamp(ρ)) ⊙ e_r`, one per row of
/// `noise`, each returned as parameter blocks.
pub fn sample_blocks_graph(
    g: &mut Graph,
    model: &Model,
    nu: Var,
    rho: Var,
    noise: &Tensor,
) -> Vec<Vec<Var>> {
    let layout = model.blocks();
    let nu_b = model.split_graph(g, nu);
    let rho_c = g.clamp(rho, RHO_MIN, RHO_MAX);
    let sd = g.exp(rho_c);
    let sd_b = model.split_graph(g, sd);
    (0..noise.rows())
        .map(|k| {
            let e_row = noise.row(k);
            layout
                .iter()
                .enumerate()
                .map(|(j, &(off, r, c))| {
                    let e = g.constant(Tensor::new(r, c, e_row[off..off + r * c].to_vec()));
                    let scaled = g.mul(sd_b[j], e);
                    g.add(nu_b[j], scaled)
                })
                .collect()
        })
        .collect()
}

/// `(1/R) Σ_r` mean log-loss of `data` at the reparametrized samples.
pub fn expected_nll_graph(
    g: &mut Graph,
    model: &Model,
    nu: Var,
    rho: Var,
    noise: &Tensor,
    data: &GraphBatch,
) -> Var {
    let samples = sample_blocks_graph(g, model, nu, rho, noise);
    let r = samples.len();
    let mut total = model.nll_blocks(g, &samples[0], data);
    for blocks in &samples[1..] {
        let l = model.nll_blocks(g, blocks, data);
        total = g.add(total, l);
    }
    g.scale(total, 1.0 / r as f64)
}

/// `R × D` standard-normal draws.
pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(rows, cols, data)
}

pub fn sample_params<R: Rng + ?Sized>(q: &VariationalParams, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..q.dim()).map(|_| StandardNormal.sample(rng)).collect();
    q.reparametrize(&e)
}

/// `(1/R) Σ_r G(φ_r)` with `φ_r ~ q`.
pub fn estimate_expectation<R, G>(mut g: G, q: &VariationalParams, r: usize, rng: &mut R) -> f64
where
    R: Rng + ?Sized,
    G: FnMut(&[f64]) -> f64,
{
    assert!(r >= 1, "ensemble size must be positive");
    (0..r).map(|_| g(&sample_params(q, rng))).sum::<f64>() / r as f64
}

/// Ensemble average of demodulator probabilities, `N × 16`.
pub fn ensemble_demod_probs<R: Rng + ?Sized>(
    shape: &MlpShape,
    inputs: &Tensor,
    q: &VariationalParams,
    r: usize,
    rng: &mut R,
) -> Tensor {
    assert!(r >= 1, "ensemble size must be positive");
    let n = inputs.rows();
    let k = shape.n_outputs();
    let mut acc = Tensor::zeros(n, k);
    for _ in 0..r {
        let phi = sample_params(q, rng);
        let probs = point_demod_probs(shape, inputs, &phi);
        for (a, p) in acc.data_mut().iter_mut().zip(probs.data()) {
            *a += p;
        }
    }
    acc.map(|a| a / r as f64)
}

/// Demodulator probabilities at a single parameter vector, `N × 16`.
pub fn point_demod_probs(shape: &MlpShape, inputs: &Tensor, phi: &[f64]) -> Tensor {
    let logits = mlp_logits_batch(shape, phi, inputs);
    let k = logits.cols();
    let mut out = logits;
    for r in 0..out.rows() {
        let row = &mut out.data_mut()[r * k..(r + 1) * k];
        let lse = logsumexp(row);
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    out
}

/// Predictive mean and variance of the equalizer mixture for each input row.
/// The variance includes the per-component output noise `1/β`.
pub fn ensemble_equalizer<R: Rng + ?Sized>(
    inputs: &Tensor,
    q: &VariationalParams,
    beta: f64,
    r: usize,
    rng: &mut R,
) -> Vec<(f64, f64)> {
    assert!(r >= 1, "ensemble size must be positive");
    let n = inputs.rows();
    let mut s1 = vec![0.0; n];
    let mut s2 = vec![0.0; n];
    for _ in 0..r {
        let phi = sample_params(q, rng);
        for i in 0..n {
            let y = inputs.row(i);
            let m = phi[0] * y[0] + phi[1] * y[1];
            s1[i] += m;
            s2[i] += m * m;
        }
    }
    let rf = r as f64;
    s1.iter()
        .zip(&s2)
        .map(|(a, b)| {
            let mean = a / rf;
            let var = (b / rf - mean * mean).max(0.0) + 1.0 / beta;
            (mean, var)
        })
        .collect()
}

/// Random parameter vector with PyTorch-style uniform fan-in scaling for the
/// MLP and a standard normal draw for the equalizer.
pub fn init_params<R: Rng + ?Sized>(model: &Model, rng: &mut R) -> Vec<f64> {
    match model {
        Model::Demodulator(shape) => {
            let mut phi = Vec::with_capacity(shape.dim());
            for w in shape.widths.windows(2) {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let u = Uniform::new_inclusive(-bound, bound);
                for _ in 0..w[0] * w[1] + w[1] {
                    phi.push(u.sample(rng));
                }
            }
            phi
        }
        Model::Equalizer { .. } => (0..2).map(|_| StandardNormal.sample(rng)).collect(),
    }
}

/// Hyperparameter initialization for meta-training: ν ~ N(0, s²) with
/// s = 0.1 (demodulator) or 1 (equalizer), ρ = log 0.1.
pub fn init_hyperparams<R: Rng + ?Sized>(model: &Model, bayes: bool, rng: &mut R) -> Hyperparams {
    let s = match model {
        Model::Demodulator(_) => 0.1,
        Model::Equalizer { .. } => 1.0,
    };
    let nu: Vec<f64> = (0..model.dim())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        })
        .collect();
    if bayes {
        Hyperparams::Bayes(VariationalParams::isotropic(nu, 0.1f64.ln()))
    } else {
        Hyperparams::Freq { init: nu }
    }
}

impl ConstellationKind {
    pub fn model(self, beta: f64) -> Model {
        match self {
            ConstellationKind::Qam16 => Model::demodulator(),
            ConstellationKind::Pam4 => Model::equalizer(beta),
        }
    }
}
