//! Outer loops: frequentist and Bayesian meta-training of the shared
//! hyperparameters, and meta-test evaluation on fresh frames.

use std::time::Instant;

use autodiff::{Graph, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{
    bayes_adapt_graph, freq_adapt_graph, metatest_adapt_burnin, Adapted, BayesStepConfig,
    BurnInConfig,
};
use crate::channel::FrameDataset;
use crate::error::{Error, Result};
use crate::models::{
    clamp_rho, ensemble_demod_probs, ensemble_equalizer, expected_nll_graph, point_demod_probs,
    standard_normal_matrix, Batch, Hyperparams, Model, VariationalParams,
};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaMode {
    Freq,
    Bayes,
}

impl MetaMode {
    pub fn name(self) -> &'static str {
        match self {
            MetaMode::Freq => "freq",
            MetaMode::Bayes => "bayes",
        }
    }
}

/// Update rule applied to the meta-gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetaOptimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl MetaOptimizer {
    pub fn adam() -> Self {
        MetaOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainConfig {
    /// Frames per meta-batch; `None` uses every frame.
    pub batch_size: Option<usize>,
    /// Inner adaptation steps.
    pub inner_steps: usize,
    pub eta: f64,
    pub kappa: f64,
    /// Monte Carlo samples for the inner gradients and the outer loss.
    pub r: usize,
    pub kl_coeff: f64,
    pub meta_iters: usize,
    pub seed: u64,
    /// Per-frame split sizes used at every meta-iteration.
    pub n_tr: usize,
    pub n_te: usize,
    /// Drop second-order terms of the meta-gradient.
    pub first_order: bool,
    pub optimizer: MetaOptimizer,
    /// Lower bound on the prior log standard deviations (Bayesian mode).
    pub prior_rho_min: f64,
}

/// Smallest prior log standard deviation for which the KL pull on ν in the
/// inner step `q ← q − (η/N)∇F̂` contracts without oscillating:
/// `σ_p² ≥ η · kl_coeff / N`.
pub fn stable_prior_rho_min(eta: f64, kl_coeff: f64, n_tr: usize) -> f64 {
    if kl_coeff <= 0.0 || n_tr == 0 {
        return crate::models::RHO_MIN;
    }
    (0.5 * (eta * kl_coeff / n_tr as f64).ln()).max(crate::models::RHO_MIN)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTraceEntry {
    pub iter: usize,
    pub meta_loss: f64,
    /// Hash of ξ after the update.
    pub xi_hash: String,
    pub wall_secs: f64,
}

pub type MetaTrace = Vec<MetaTraceEntry>;

/// Short hex digest of a parameter vector.
pub fn hash_params(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    hash_bytes(&bytes)
}

/// First 8 bytes of the SHA-256 digest, in hex.
pub fn hash_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Optimizer {
    kind: MetaOptimizer,
    kappa: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(kind: MetaOptimizer, kappa: f64, dim: usize) -> Self {
        Self {
            kind,
            kappa,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            MetaOptimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.kappa * g;
                }
            }
            MetaOptimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.kappa * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

fn split_index(iter: usize, frame: usize) -> u64 {
    ((iter as u64) << 32) | frame as u64
}

/// Meta-loss and its gradient with respect to ξ for one frame.
fn frame_meta_gradient(
    model: &Model,
    xi: &Hyperparams,
    frame: &FrameDataset,
    cfg: &MetaTrainConfig,
    iter: usize,
    frame_idx: usize,
) -> Result<(f64, Vec<f64>, usize)> {
    let idx = split_index(iter, frame_idx);
    let (train, test) =
        frame.random_split(cfg.n_tr, cfg.n_te, &mut stream(cfg.seed, "meta-split", idx));
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset("meta-training frame split"));
    }
    let constellation = model.constellation();
    let tr = Batch::new(&train, &constellation);
    let te = Batch::new(&test, &constellation);
    let stage = "meta-training";
    let mut g = Graph::new();
    let tr_g = tr.to_graph(&mut g);
    let te_g = te.to_graph(&mut g);
    let d = model.dim();
    let (loss, leaves): (Var, Vec<Var>) = match xi {
        Hyperparams::Freq { init } => {
            let leaf = g.leaf(Tensor::column(init));
            let phi = freq_adapt_graph(
                &mut g,
                model,
                &tr_g,
                leaf,
                cfg.eta,
                cfg.inner_steps,
                cfg.first_order,
            )
            .map_err(|e| retag(e, iter))?;
            (model.nll_graph(&mut g, phi, &te_g), vec![leaf])
        }
        Hyperparams::Bayes(q) => {
            let nu = g.leaf(Tensor::column(&q.nu));
            let rho = g.leaf(Tensor::column(&q.rho));
            let step = BayesStepConfig {
                eta: cfg.eta,
                r: cfg.r,
                kl_coeff: cfg.kl_coeff,
            };
            let mut rng = stream(cfg.seed, "meta-inner-noise", idx);
            let r = cfg.r;
            let mut noise = || standard_normal_matrix(r, d, &mut rng);
            let (nu_t, rho_t) = bayes_adapt_graph(
                &mut g,
                model,
                &tr_g,
                train.len(),
                (nu, rho),
                &step,
                cfg.inner_steps,
                cfg.first_order,
                &mut noise,
            )
            .map_err(|e| retag(e, iter))?;
            let e = standard_normal_matrix(r, d, &mut stream(cfg.seed, "meta-outer-noise", idx));
            let loss = expected_nll_graph(&mut g, model, nu_t, rho_t, &e, &te_g);
            (loss, vec![nu, rho])
        }
    };
    let grads = g.grad(loss, &leaves).map_err(Error::at_step(stage, iter))?;
    let mut flat = Vec::with_capacity(xi.dim());
    for gv in grads {
        flat.extend_from_slice(g.value(gv).data());
    }
    Ok((g.item(loss), flat, test.len()))
}

fn retag(e: Error, iter: usize) -> Error {
    match e {
        Error::Diverged { source, .. } => Error::Diverged {
            stage: "meta-training",
            step: iter,
            source,
        },
        other => other,
    }
}

fn set_flat(xi: &mut Hyperparams, flat: &[f64], rho_min: f64) {
    match xi {
        Hyperparams::Freq { init } => init.copy_from_slice(flat),
        Hyperparams::Bayes(q) => {
            let d = q.dim();
            q.nu.copy_from_slice(&flat[..d]);
            for (r, v) in q.rho.iter_mut().zip(&flat[d..]) {
                *r = clamp_rho(*v).max(rho_min);
            }
        }
    }
}

/// Meta-trains ξ on `frames`. The variant of `xi0` selects frequentist or
/// Bayesian meta-learning.
pub fn meta_train(
    model: &Model,
    frames: &[FrameDataset],
    xi0: Hyperparams,
    cfg: &MetaTrainConfig,
) -> Result<(Hyperparams, MetaTrace)> {
    model.check_dim(xi0.dim())?;
    if frames.is_empty() {
        return Err(Error::EmptyDataset("meta-training"));
    }
    let b = cfg.batch_size.unwrap_or(frames.len()).min(frames.len());
    if b == 0 {
        return Err(Error::Config("meta-batch size must be positive".into()));
    }
    let mut xi = xi0;
    let mut flat = xi.flat();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.kappa, flat.len());
    let mut trace = Vec::with_capacity(cfg.meta_iters);
    let start = Instant::now();
    for it in 0..cfg.meta_iters {
        let chosen: Vec<usize> = if b == frames.len() {
            (0..b).collect()
        } else {
            sample_indices(
                &mut stream(cfg.seed, "meta-batch", it as u64),
                frames.len(),
                b,
            )
            .into_vec()
        };
        let mut total_te = 0usize;
        let mut acc = vec![0.0; flat.len()];
        let mut meta_loss = 0.0;
        for &f in &chosen {
            let (loss, grad, n_te) = frame_meta_gradient(model, &xi, &frames[f], cfg, it, f)?;
            let w = n_te as f64;
            meta_loss += w * loss;
            for (a, g) in acc.iter_mut().zip(&grad) {
                *a += w * g;
            }
            total_te += n_te;
        }
        let norm = 1.0 / total_te as f64;
        for a in acc.iter_mut() {
            *a *= norm;
        }
        meta_loss *= norm;
        opt.step(&mut flat, &acc);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "meta-training diverged at iteration {it}; lower kappa"
            )));
        }
        set_flat(&mut xi, &flat, cfg.prior_rho_min);
        flat = xi.flat();
        trace.push(MetaTraceEntry {
            iter: it,
            meta_loss,
            xi_hash: hash_params(&flat),
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok((xi, trace))
}

/// Settings for meta-test adaptation and prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaTestConfig {
    pub burnin: BurnInConfig,
    /// Ensemble size for Bayesian predictions.
    pub r_te: usize,
    pub seed: u64,
}

/// Payload predictions for one frame.
#[derive(Debug, Clone, PartialEq)]
pub enum FramePredictions {
    Demod {
        truth: Vec<usize>,
        pred: Vec<usize>,
        confidence: Vec<f64>,
    },
    Equalizer {
        truth: Vec<f64>,
        mean: Vec<f64>,
    },
}

/// Hard decisions and confidences from a `N × K` probability matrix.
pub fn decide(probs: &Tensor) -> (Vec<usize>, Vec<f64>) {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let k = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &p)| if p > row[best] { i } else { best });
            (k, row[k])
        })
        .unzip()
}

/// Predicts the payload of `frame` with adapted parameters.
pub fn predict_frame<R: rand::Rng + ?Sized>(
    model: &Model,
    adapted: &Adapted,
    frame: &FrameDataset,
    r_te: usize,
    rng: &mut R,
) -> FramePredictions {
    let constellation = model.constellation();
    let batch = Batch::new(&frame.test, &constellation);
    match model {
        Model::Demodulator(shape) => {
            let probs = match adapted {
                Adapted::Point(phi) => point_demod_probs(shape, &batch.inputs, phi),
                Adapted::Posterior(q) => ensemble_demod_probs(shape, &batch.inputs, q, r_te, rng),
            };
            let (pred, confidence) = decide(&probs);
            FramePredictions::Demod {
                truth: batch.labels,
                pred,
                confidence,
            }
        }
        Model::Equalizer { beta } => {
            let mean = match adapted {
                Adapted::Point(phi) => (0..batch.len())
                    .map(|i| {
                        let y = batch.inputs.row(i);
                        phi[0] * y[0] + phi[1] * y[1]
                    })
                    .collect(),
                Adapted::Posterior(q) => ensemble_equalizer(&batch.inputs, q, *beta, r_te, rng)
                    .into_iter()
                    .map(|(m, _)| m)
                    .collect(),
            };
            FramePredictions::Equalizer {
                truth: batch.targets.into_data(),
                mean,
            }
        }
    }
}

/// Burn-in adaptation on each frame's pilots, then prediction on its payload.
pub fn meta_test_eval(
    model: &Model,
    xi: &Hyperparams,
    expected: MetaMode,
    frames: &[FrameDataset],
    cfg: &MetaTestConfig,
) -> Result<Vec<FramePredictions>> {
    if xi.mode() != expected.name() {
        return Err(Error::ModeMismatch {
            expected: expected.name(),
            found: xi.mode(),
        });
    }
    model.check_dim(xi.dim())?;
    frames
        .iter()
        .enumerate()
        .map(|(i, frame)| {
            let mut rng = stream(cfg.seed, "meta-test-adapt", i as u64);
            let adapted = metatest_adapt_burnin(model, &frame.train, xi, &cfg.burnin, &mut rng)?;
            let mut rng = stream(cfg.seed, "meta-test-predict", i as u64);
            Ok(predict_frame(model, &adapted, frame, cfg.r_te, &mut rng))
        })
        .collect()
}

/// Posterior after plain Bayesian adaptation of `xi` on every training pilot
/// of `frame` (used to summarize per-frame knowledge).
pub fn frame_posterior(
    model: &Model,
    xi: &VariationalParams,
    frame: &FrameDataset,
    cfg: &BayesStepConfig,
    steps: usize,
    seed: u64,
    index: u64,
) -> Result<VariationalParams> {
    let pilots: Vec<_> = frame.samples().copied().collect();
    crate::adaptation::bayes_adapt(
        model,
        &pilots,
        xi,
        cfg,
        steps,
        &mut stream(seed, "frame-posterior", index),
    )
}
