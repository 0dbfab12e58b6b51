//! Active meta-learning for the equalizer: score candidate model parameters
//! against the per-frame posteriors, pick the least explored one, invert it
//! to a channel state and simulate the next meta-training frame.

use std::f64::consts::{PI, TAU};

use autodiff::{Graph, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{bayes_adapt, BayesStepConfig};
use crate::channel::{
    generate_frame, sample_eq_state, ChannelState, Constellation, EqChannelState, FrameDataset,
    Noise, SymbolSource,
};
use crate::error::{Error, Result};
use crate::meta::{
    meta_test_eval, meta_train, FramePredictions, MetaMode, MetaTestConfig, MetaTrainConfig,
};
use crate::metrics::mse;
use crate::models::{init_hyperparams, Hyperparams, Model, VariationalParams};
use crate::rng::stream;

const TIE_TOL: f64 = 1e-12;

/// Smallest parameter norm accepted by the channel inversion.
pub const INVERSION_EPS: f64 = 1e-9;

/// Log-density of `phi` under each posterior.
fn component_logpdfs(phi: &[f64], posts: &[VariationalParams]) -> Vec<f64> {
    posts
        .iter()
        .map(|q| {
            q.nu.iter()
                .zip(&q.rho)
                .zip(phi)
                .map(|((m, r), x)| {
                    let z = (x - m) * (-r).exp();
                    -0.5 * ((2.0 * PI).ln() + z * z) - r
                })
                .sum()
        })
        .collect()
}

fn check_posts(phi: &[f64], posts: &[VariationalParams]) -> Result<()> {
    if posts.is_empty() {
        return Err(Error::EmptyDataset("scoring"));
    }
    for q in posts {
        if q.dim() != phi.len() {
            return Err(Error::Dimension {
                expected: phi.len(),
                got: q.dim(),
            });
        }
    }
    Ok(())
}

/// `s(φ) = −log((1/t) Σ_τ q_τ(φ))`.
pub fn score(phi: &[f64], posts: &[VariationalParams]) -> Result<f64> {
    check_posts(phi, posts)?;
    let lp = component_logpdfs(phi, posts);
    Ok((posts.len() as f64).ln() - autodiff::logsumexp(&lp))
}

/// Score and its gradient with respect to `phi`.
pub fn score_grad(phi: &[f64], posts: &[VariationalParams]) -> Result<(f64, Vec<f64>)> {
    check_posts(phi, posts)?;
    let lp = component_logpdfs(phi, posts);
    let lse = autodiff::logsumexp(&lp);
    let mut grad = vec![0.0; phi.len()];
    for (q, l) in posts.iter().zip(&lp) {
        let w = (l - lse).exp();
        for (d, g) in grad.iter_mut().enumerate() {
            *g += w * (phi[d] - q.nu[d]) * (-2.0 * q.rho[d]).exp();
        }
    }
    Ok(((posts.len() as f64).ln() - lse, grad))
}

/// Polar grid over the unit disk. Radii run from 0 to 1 inclusive, angles
/// from 0 in steps of `2π / n_angle`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarGrid {
    pub n_radius: usize,
    pub n_angle: usize,
}

impl Default for PolarGrid {
    fn default() -> Self {
        Self {
            n_radius: 64,
            n_angle: 256,
        }
    }
}

impl PolarGrid {
    pub fn radius(&self, i: usize) -> f64 {
        if self.n_radius <= 1 {
            1.0
        } else {
            i as f64 / (self.n_radius - 1) as f64
        }
    }

    pub fn angle(&self, j: usize) -> f64 {
        TAU * j as f64 / self.n_angle as f64
    }

    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        let (s, c) = self.angle(j).sin_cos();
        let r = self.radius(i);
        [r * c, r * s]
    }

    /// Grid points ordered by angle, then radius.
    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.n_angle).flat_map(move |j| (0..self.n_radius).map(move |i| self.point(i, j)))
    }
}

/// Settings of the scoring maximization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub grid: PolarGrid,
    pub refine_steps: usize,
    /// Initial step of the projected ascent; halved on every rejected move.
    pub step: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            grid: PolarGrid::default(),
            refine_steps: 50,
            step: 0.05,
        }
    }
}

fn project_unit_disk(phi: [f64; 2]) -> [f64; 2] {
    let n = phi[0].hypot(phi[1]);
    if n > 1.0 {
        [phi[0] / n, phi[1] / n]
    } else {
        phi
    }
}

/// Maximizer of the score over the unit disk and its score value.
pub fn select_next_param(
    posts: &[VariationalParams],
    cfg: &SelectConfig,
) -> Result<([f64; 2], f64)> {
    if let Some(q) = posts.first() {
        if q.dim() != 2 {
            return Err(Error::Dimension {
                expected: 2,
                got: q.dim(),
            });
        }
    }
    let mut best = cfg.grid.point(0, 0);
    let mut best_s = score(&best, posts)?;
    for p in cfg.grid.points() {
        let s = score(&p, posts)?;
        // Scores equal up to rounding count as ties and keep the earlier point.
        if s > best_s + TIE_TOL * (1.0 + best_s.abs()) {
            best_s = s;
            best = p;
        }
    }
    let mut step = cfg.step;
    for _ in 0..cfg.refine_steps {
        let (_, g) = score_grad(&best, posts)?;
        let gn = g[0].hypot(g[1]);
        if gn == 0.0 || !gn.is_finite() {
            break;
        }
        let cand = project_unit_disk([best[0] + step * g[0] / gn, best[1] + step * g[1] / gn]);
        let s = score(&cand, posts)?;
        if s > best_s {
            best_s = s;
            best = cand;
        } else {
            step *= 0.5;
        }
    }
    Ok((best, best_s))
}

/// Minimum-norm channel `c = φ / ‖φ‖²` with `φᵀc = 1`.
pub fn invert_channel_equalizer(phi: &[f64]) -> Result<EqChannelState> {
    if phi.len() != 2 {
        return Err(Error::Dimension {
            expected: 2,
            got: phi.len(),
        });
    }
    let n2 = phi[0] * phi[0] + phi[1] * phi[1];
    let norm = n2.sqrt();
    if !(norm > INVERSION_EPS) {
        return Err(Error::DegenerateParameter { norm });
    }
    Ok(EqChannelState {
        c: [phi[0] / n2, phi[1] / n2],
    })
}

/// Settings of the gradient-based channel inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdInversionConfig {
    pub steps: usize,
    pub lr: f64,
    /// Simulated channel uses per step.
    pub batch: usize,
    pub noise: Noise,
}

/// Channel minimizing the expected equalizer log-loss of `phi`, found by SGD
/// on reparametrized simulated data `y = c x + z` starting from `c = 0`.
pub fn invert_channel_sgd<R: Rng + ?Sized>(
    model: &Model,
    phi: &[f64],
    cfg: &SgdInversionConfig,
    rng: &mut R,
) -> Result<EqChannelState> {
    let Model::Equalizer { .. } = model else {
        return Err(Error::Config(
            "gradient inversion is implemented for the equalizer".into(),
        ));
    };
    model.check_dim(phi.len())?;
    let constellation = Constellation::pam4();
    let sd = (0.5 * cfg.noise.power()).sqrt();
    let mut c = [0.0; 2];
    for step in 0..cfg.steps {
        let labels: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.gen_range(0..constellation.len()))
            .collect();
        let xs: Vec<f64> = labels.iter().map(|&k| constellation.point(k).re).collect();
        let z: Vec<f64> = (0..2 * cfg.batch)
            .map(|_| {
                let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                sd * e
            })
            .collect();
        let mut g = Graph::new();
        let cv = g.leaf(Tensor::column(&c));
        let x = g.constant(Tensor::column(&xs));
        let zv = g.constant(Tensor::new(cfg.batch, 2, z));
        let clean = g.matmul_nt(x, cv);
        let y = g.add(clean, zv);
        let data = crate::models::GraphBatch {
            inputs: y,
            labels: labels.into(),
            targets: x,
        };
        let phi_v = g.constant(Tensor::column(phi));
        let loss = model.nll_graph(&mut g, phi_v, &data);
        let grad = g
            .grad(loss, &[cv])
            .map_err(Error::at_step("channel inversion", step))?;
        let gv = g.value(grad[0]).data();
        c[0] -= cfg.lr * gv[0];
        c[1] -= cfg.lr * gv[1];
    }
    Ok(EqChannelState { c })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionMode {
    Active,
    Passive,
}

impl AcquisitionMode {
    pub fn name(self) -> &'static str {
        match self {
            AcquisitionMode::Active => "active",
            AcquisitionMode::Passive => "passive",
        }
    }
}

/// Settings of one active (or passive) meta-learning run.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveConfig {
    pub mode: AcquisitionMode,
    pub t_init: usize,
    /// Total number of meta-training frames at the end of the run.
    pub budget: usize,
    pub noise: Noise,
    /// Channel uses per meta-training frame.
    pub frame_len: usize,
    /// Meta-training settings; `meta_iters == 0` means one meta-update per
    /// available frame.
    pub meta: MetaTrainConfig,
    /// Inner steps used to re-adapt the per-frame posteriors before scoring.
    pub posterior_steps: usize,
    pub select: SelectConfig,
    pub test: MetaTestConfig,
    pub seed: u64,
}

/// One acquisition round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionRound {
    /// Number of meta-training frames available in this round.
    pub t: usize,
    pub c_next: [f64; 2],
    /// Selected parameter and its score (active mode only).
    pub phi_next: Option<[f64; 2]>,
    pub score: Option<f64>,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionHistory {
    pub mode: AcquisitionMode,
    pub seed: u64,
    pub rounds: Vec<AcquisitionRound>,
    /// Meta-test MSE for every frame count from `t_init` to the budget.
    pub mse_curve: Vec<(usize, f64)>,
}

fn eq_frame(state: EqChannelState, cfg: &ActiveConfig, tag: &str, index: u64) -> FrameDataset {
    let mut rng = stream(cfg.seed, tag, index);
    generate_frame(
        &ChannelState::Equalizer(state),
        cfg.frame_len,
        0,
        cfg.noise,
        SymbolSource::Uniform,
        &mut rng,
    )
}

/// Meta-test MSE of `xi` pooled over the payloads of `frames`.
pub fn meta_test_mse(
    model: &Model,
    xi: &Hyperparams,
    frames: &[FrameDataset],
    cfg: &MetaTestConfig,
) -> Result<f64> {
    let preds = meta_test_eval(model, xi, MetaMode::Bayes, frames, cfg)?;
    let (mut truth, mut mean) = (Vec::new(), Vec::new());
    for p in preds {
        if let FramePredictions::Equalizer { truth: t, mean: m } = p {
            truth.extend(t);
            mean.extend(m);
        }
    }
    mse(&mean, &truth)
}

/// Meta-trains from a fresh ξ on `frames` for round `t`.
fn train_round(
    model: &Model,
    frames: &[FrameDataset],
    cfg: &ActiveConfig,
    t: usize,
) -> Result<Hyperparams> {
    let xi0 = init_hyperparams(model, true, &mut stream(cfg.seed, "active-xi", t as u64));
    let mut meta = cfg.meta.clone();
    meta.seed = crate::rng::derive_seed(cfg.seed, "active-meta", t as u64);
    if meta.meta_iters == 0 {
        meta.meta_iters = frames.len();
    }
    Ok(meta_train(model, frames, xi0, &meta)?.0)
}

/// Runs acquisition rounds from `t_init` frames up to the budget and reports
/// the meta-test MSE after every round. `test_frames` are shared between
/// modes so that active and passive runs are compared on the same channels.
pub fn active_loop(
    model: &Model,
    test_frames: &[FrameDataset],
    cfg: &ActiveConfig,
) -> Result<(Hyperparams, AcquisitionHistory)> {
    let Model::Equalizer { .. } = model else {
        return Err(Error::Config(
            "active acquisition is implemented for the equalizer".into(),
        ));
    };
    if cfg.t_init == 0 || cfg.budget < cfg.t_init {
        return Err(Error::Config(format!(
            "need 1 <= t_init ({}) <= budget ({})",
            cfg.t_init, cfg.budget
        )));
    }
    let mut frames: Vec<FrameDataset> = (0..cfg.t_init)
        .map(|i| {
            let state = sample_eq_state(&mut stream(cfg.seed, "initial-channel", i as u64));
            eq_frame(state, cfg, "initial-frame", i as u64)
        })
        .collect();
    let mut history = AcquisitionHistory {
        mode: cfg.mode,
        seed: cfg.seed,
        rounds: Vec::with_capacity(cfg.budget - cfg.t_init),
        mse_curve: Vec::with_capacity(cfg.budget - cfg.t_init + 1),
    };
    let step_cfg = BayesStepConfig {
        eta: cfg.meta.eta,
        r: cfg.meta.r,
        kl_coeff: cfg.meta.kl_coeff,
    };
    loop {
        let t = frames.len();
        let xi = train_round(model, &frames, cfg, t)?;
        let loss = meta_test_mse(model, &xi, test_frames, &cfg.test)?;
        history.mse_curve.push((t, loss));
        if t >= cfg.budget {
            return Ok((xi, history));
        }
        let (state, phi_next, score_next) = match cfg.mode {
            AcquisitionMode::Passive => (
                sample_eq_state(&mut stream(cfg.seed, "passive-channel", t as u64)),
                None,
                None,
            ),
            AcquisitionMode::Active => {
                let prior = xi.as_bayes()?;
                let posts = frames
                    .iter()
                    .enumerate()
                    .map(|(i, f)| {
                        let pilots: Vec<_> = f.samples().copied().collect();
                        let mut rng =
                            stream(cfg.seed, "active-posterior", ((t as u64) << 32) | i as u64);
                        bayes_adapt(
                            model,
                            &pilots,
                            prior,
                            &step_cfg,
                            cfg.posterior_steps,
                            &mut rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (phi, s) = select_next_param(&posts, &cfg.select)?;
                (invert_channel_equalizer(&phi)?, Some(phi), Some(s))
            }
        };
        frames.push(eq_frame(state, cfg, "acquired-frame", t as u64));
        history.rounds.push(AcquisitionRound {
            t,
            c_next: state.c,
            phi_next,
            score: score_next,
            mse: loss,
        });
    }
}
