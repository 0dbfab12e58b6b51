//! Per-frame adaptation: gradient descent from an initialization, gradient
//! descent on the estimated variational free energy, and the two-phase
//! burn-in used at meta-test time.
//!
//! Every update is built from one graph kernel. The plain entry points run
//! each step on a fresh graph; the `_graph` entry points chain the steps on a
//! caller-owned graph so that the result can be differentiated with respect
//! to the hyperparameters.

use autodiff::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::channel::Sample;
use crate::error::{Error, Result};
use crate::models::{
    expected_nll_graph, kl_graph, standard_normal_matrix, Batch, GraphBatch, Hyperparams, Model,
    VariationalParams, RHO_MAX, RHO_MIN,
};

/// Learning rate multiplier of the second burn-in phase.
pub const BURNIN_RATE_FACTOR: f64 = 0.05;

/// Settings of the Bayesian inner loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesStepConfig {
    pub eta: f64,
    /// Monte Carlo samples per gradient estimate.
    pub r: usize,
    pub kl_coeff: f64,
}

/// Mean training log-loss of `phi` on `samples`.
pub fn train_log_loss(model: &Model, samples: &[Sample], phi: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("training log-loss"));
    }
    model.check_dim(phi.len())?;
    Ok(model.nll(phi, &Batch::new(samples, &model.constellation())))
}

fn freq_step_graph(
    g: &mut Graph,
    model: &Model,
    phi: Var,
    data: &GraphBatch,
    eta: f64,
    first_order: bool,
) -> std::result::Result<Var, autodiff::AutodiffError> {
    let loss = model.nll_graph(g, phi, data);
    let mut grad = g.grad(loss, &[phi])?[0];
    if first_order {
        grad = g.stop_grad(grad);
    }
    let step = g.scale(grad, -eta);
    Ok(g.add(phi, step))
}

/// `I` full-batch gradient steps from `xi`, recorded on `g`. With
/// `first_order` the inner gradients are treated as constants.
pub fn freq_adapt_graph(
    g: &mut Graph,
    model: &Model,
    data: &GraphBatch,
    xi: Var,
    eta: f64,
    steps: usize,
    first_order: bool,
) -> Result<Var> {
    let mut phi = xi;
    for i in 0..steps {
        phi = freq_step_graph(g, model, phi, data, eta, first_order)
            .map_err(Error::at_step("frequentist adaptation", i))?;
    }
    Ok(phi)
}

/// `I` full-batch gradient steps `φ ← φ − η∇L(φ)` from `xi`.
pub fn freq_adapt(
    model: &Model,
    train: &[Sample],
    xi: &[f64],
    eta: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    model.check_dim(xi.len())?;
    if steps == 0 {
        return Ok(xi.to_vec());
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset("frequentist adaptation"));
    }
    let batch = Batch::new(train, &model.constellation());
    let mut phi = xi.to_vec();
    for i in 0..steps {
        let mut g = Graph::new();
        let data = batch.to_graph(&mut g);
        let p = g.leaf(Tensor::column(&phi));
        let next = freq_step_graph(&mut g, model, p, &data, eta, false)
            .map_err(Error::at_step("frequentist adaptation", i))?;
        phi = g.value(next).data().to_vec();
    }
    Ok(phi)
}

/// Graph of `N · L̂(q) + kl_coeff · KL(q ‖ p)` where `L̂` averages the mean
/// log-loss over the rows of `noise` (`R × D` standard-normal draws).
#[allow(clippy::too_many_arguments)]
pub fn free_energy_graph(
    g: &mut Graph,
    model: &Model,
    data: &GraphBatch,
    n: usize,
    q: (Var, Var),
    prior: (Var, Var),
    noise: &Tensor,
    kl_coeff: f64,
) -> Var {
    let lhat = expected_nll_graph(g, model, q.0, q.1, noise, data);
    let data_term = g.scale(lhat, n as f64);
    if kl_coeff == 0.0 {
        return data_term;
    }
    let kl = kl_graph(g, q.0, q.1, prior.0, prior.1);
    let kl = g.scale(kl, kl_coeff);
    g.add(data_term, kl)
}

/// Estimated free energy on a fixed set of noise draws.
pub fn free_energy_estimate(
    model: &Model,
    train: &[Sample],
    q: &VariationalParams,
    prior: &VariationalParams,
    noise: &Tensor,
    kl_coeff: f64,
) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("free energy"));
    }
    model.check_dim(q.dim())?;
    model.check_dim(prior.dim())?;
    let batch = Batch::new(train, &model.constellation());
    let mut g = Graph::new();
    let data = batch.to_graph(&mut g);
    let qv = (
        g.leaf(Tensor::column(&q.nu)),
        g.leaf(Tensor::column(&q.rho)),
    );
    let pv = (
        g.constant(Tensor::column(&prior.nu)),
        g.constant(Tensor::column(&prior.rho)),
    );
    let f = free_energy_graph(&mut g, model, &data, train.len(), qv, pv, noise, kl_coeff);
    g.check_finite()?;
    Ok(g.item(f))
}

#[allow(clippy::too_many_arguments)]
fn bayes_step_graph(
    g: &mut Graph,
    model: &Model,
    data: &GraphBatch,
    n: usize,
    q: (Var, Var),
    prior: (Var, Var),
    noise: &Tensor,
    cfg: &BayesStepConfig,
    first_order: bool,
) -> std::result::Result<(Var, Var), autodiff::AutodiffError> {
    let f = free_energy_graph(g, model, data, n, q, prior, noise, cfg.kl_coeff);
    let grads = g.grad(f, &[q.0, q.1])?;
    let (mut g_nu, mut g_rho) = (grads[0], grads[1]);
    if first_order {
        g_nu = g.stop_grad(g_nu);
        g_rho = g.stop_grad(g_rho);
    }
    let rate = -cfg.eta / n as f64;
    let d_nu = g.scale(g_nu, rate);
    let d_rho = g.scale(g_rho, rate);
    let nu = g.add(q.0, d_nu);
    let rho = g.add(q.1, d_rho);
    let rho = g.clamp(rho, RHO_MIN, RHO_MAX);
    Ok((nu, rho))
}

/// `I` steps `q ← q − (η/N)∇_q F̂` starting from the prior `xi`, recorded on
/// `g`. Gradients with respect to `xi` flow through both the initialization
/// and the KL regularizer. `noise` supplies one `R × D` draw per step.
#[allow(clippy::too_many_arguments)]
pub fn bayes_adapt_graph(
    g: &mut Graph,
    model: &Model,
    data: &GraphBatch,
    n: usize,
    xi: (Var, Var),
    cfg: &BayesStepConfig,
    steps: usize,
    first_order: bool,
    noise: &mut dyn FnMut() -> Tensor,
) -> Result<(Var, Var)> {
    // Distinct nodes so that inner gradients are partials in q only.
    let mut q = (g.offset(xi.0, 0.0), g.offset(xi.1, 0.0));
    for i in 0..steps {
        let e = noise();
        q = bayes_step_graph(g, model, data, n, q, xi, &e, cfg, first_order)
            .map_err(Error::at_step("Bayesian adaptation", i))?;
    }
    Ok(q)
}

/// Continues Bayesian adaptation from `q` towards the posterior under `prior`.
fn bayes_steps_from(
    model: &Model,
    batch: &Batch,
    q: VariationalParams,
    prior: &VariationalParams,
    cfg: &BayesStepConfig,
    steps: usize,
    noise: &mut dyn FnMut() -> Tensor,
) -> Result<VariationalParams> {
    let mut q = q;
    for i in 0..steps {
        let mut g = Graph::new();
        let data = batch.to_graph(&mut g);
        let qv = (
            g.leaf(Tensor::column(&q.nu)),
            g.leaf(Tensor::column(&q.rho)),
        );
        let pv = (
            g.constant(Tensor::column(&prior.nu)),
            g.constant(Tensor::column(&prior.rho)),
        );
        let e = noise();
        let (nu, rho) = bayes_step_graph(&mut g, model, &data, batch.len(), qv, pv, &e, cfg, false)
            .map_err(Error::at_step("Bayesian adaptation", i))?;
        q = VariationalParams::new(g.value(nu).data().to_vec(), g.value(rho).data().to_vec());
    }
    Ok(q)
}

/// Bayesian adaptation with caller-supplied noise draws.
pub fn bayes_adapt_with_noise(
    model: &Model,
    train: &[Sample],
    xi: &VariationalParams,
    cfg: &BayesStepConfig,
    steps: usize,
    noise: &mut dyn FnMut() -> Tensor,
) -> Result<VariationalParams> {
    model.check_dim(xi.dim())?;
    if steps == 0 {
        return Ok(xi.clone());
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset("Bayesian adaptation"));
    }
    let batch = Batch::new(train, &model.constellation());
    bayes_steps_from(model, &batch, xi.clone(), xi, cfg, steps, noise)
}

/// `I` steps of Bayesian adaptation with fresh noise per step.
pub fn bayes_adapt<R: Rng + ?Sized>(
    model: &Model,
    train: &[Sample],
    xi: &VariationalParams,
    cfg: &BayesStepConfig,
    steps: usize,
    rng: &mut R,
) -> Result<VariationalParams> {
    let d = model.dim();
    let r = cfg.r;
    bayes_adapt_with_noise(model, train, xi, cfg, steps, &mut || {
        standard_normal_matrix(r, d, rng)
    })
}

/// Result of meta-test adaptation.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapted {
    Point(Vec<f64>),
    Posterior(VariationalParams),
}

/// Settings of the two-phase meta-test adaptation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurnInConfig {
    pub eta: f64,
    /// Steps of the first phase.
    pub i: usize,
    /// Total steps over both phases.
    pub i_star: usize,
    /// Pilots used in the first phase.
    pub n_tr: usize,
    pub r: usize,
    pub kl_coeff: f64,
}

/// Phase 1: `I` steps at rate `η` on the first `n_tr` pilots of a seeded
/// shuffle. Phase 2: `I* − I` steps at `0.05 η` on all pilots.
pub fn metatest_adapt_burnin<R: Rng + ?Sized>(
    model: &Model,
    pilots: &[Sample],
    xi: &Hyperparams,
    cfg: &BurnInConfig,
    rng: &mut R,
) -> Result<Adapted> {
    if cfg.i_star < cfg.i {
        return Err(Error::Config(format!(
            "I_star ({}) must be at least I ({})",
            cfg.i_star, cfg.i
        )));
    }
    let mut shuffled = pilots.to_vec();
    shuffled.shuffle(rng);
    let subset = &shuffled[..cfg.n_tr.min(shuffled.len())];
    let rest = cfg.i_star - cfg.i;
    let slow = cfg.eta * BURNIN_RATE_FACTOR;
    match xi {
        Hyperparams::Freq { init } => {
            let phi = freq_adapt(model, subset, init, cfg.eta, cfg.i)?;
            let phi = freq_adapt(model, pilots, &phi, slow, rest)?;
            Ok(Adapted::Point(phi))
        }
        Hyperparams::Bayes(prior) => {
            model.check_dim(prior.dim())?;
            let d = model.dim();
            let r = cfg.r;
            let mut noise = || standard_normal_matrix(r, d, rng);
            let fast = BayesStepConfig {
                eta: cfg.eta,
                r,
                kl_coeff: cfg.kl_coeff,
            };
            let mut q = prior.clone();
            if cfg.i > 0 {
                if subset.is_empty() {
                    return Err(Error::EmptyDataset("Bayesian adaptation"));
                }
                let batch = Batch::new(subset, &model.constellation());
                q = bayes_steps_from(model, &batch, q, prior, &fast, cfg.i, &mut noise)?;
            }
            if rest > 0 {
                if pilots.is_empty() {
                    return Err(Error::EmptyDataset("Bayesian adaptation"));
                }
                let batch = Batch::new(pilots, &model.constellation());
                let cfg2 = BayesStepConfig { eta: slow, ..fast };
                q = bayes_steps_from(model, &batch, q, prior, &cfg2, rest, &mut noise)?;
            }
            Ok(Adapted::Posterior(q))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_frame, sample_eq_state, ChannelState, Noise, SymbolSource};
    use crate::rng::stream;

    fn eq_frame(seed: u64, n: usize) -> Vec<Sample> {
        let mut rng = stream(seed, "frame", 0);
        let st = ChannelState::Equalizer(sample_eq_state(&mut rng));
        generate_frame(
            &st,
            n,
            0,
            Noise::from_db(6.0),
            SymbolSource::Uniform,
            &mut rng,
        )
        .train
    }

    #[test]
    fn uniform_predictor_loss_is_log16() {
        let model = Model::demodulator();
        let samples = vec![
            Sample {
                y: [0.1, 0.2],
                x: 3,
            },
            Sample {
                y: [-1.0, 0.0],
                x: 9,
            },
        ];
        let l = train_log_loss(&model, &samples, &vec![0.0; model.dim()]).unwrap();
        assert!((l - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_predictor_loss_vanishes() {
        // Output bias puts a margin of 40 on the true class.
        let model = Model::demodulator();
        let mut phi = vec![0.0; model.dim()];
        let d = phi.len();
        phi[d - 16 + 5] = 40.0;
        let samples = vec![Sample {
            y: [0.3, 0.3],
            x: 5,
        }];
        assert!(train_log_loss(&model, &samples, &phi).unwrap() <= 1e-9);
    }

    #[test]
    fn perfect_equalizer_loss() {
        let model = Model::equalizer(150.0);
        let s = 1.0 / 5f64.sqrt();
        let samples = vec![
            Sample {
                y: [-3.0 * s, 0.0],
                x: 0,
            },
            Sample { y: [s, 7.0], x: 2 },
        ];
        let l = train_log_loss(&model, &samples, &[1.0, 0.0]).unwrap();
        assert!((l + 0.5 * (150.0 / (2.0 * std::f64::consts::PI)).ln()).abs() < 1e-12);
        assert!(matches!(
            train_log_loss(&model, &[], &[1.0, 0.0]),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn zero_steps_return_hyperparameters() {
        let model = Model::equalizer(150.0);
        let xi = [0.3, -0.2];
        assert_eq!(freq_adapt(&model, &[], &xi, 0.1, 0).unwrap(), xi);
        let q = VariationalParams::new(xi.to_vec(), vec![-1.0, -2.0]);
        let cfg = BayesStepConfig {
            eta: 0.1,
            r: 3,
            kl_coeff: 1.0,
        };
        let mut rng = stream(0, "t", 0);
        assert_eq!(bayes_adapt(&model, &[], &q, &cfg, 0, &mut rng).unwrap(), q);
    }

    #[test]
    fn plain_and_graph_paths_agree() {
        let model = Model::equalizer(150.0);
        let train = eq_frame(1, 4);
        let xi = VariationalParams::new(vec![0.5, -0.3], vec![-1.0, -1.5]);
        let cfg = BayesStepConfig {
            eta: 2e-3,
            r: 5,
            kl_coeff: 1.0,
        };
        let plain = bayes_adapt(&model, &train, &xi, &cfg, 3, &mut stream(2, "e", 0)).unwrap();

        let mut g = Graph::new();
        let data = Batch::new(&train, &model.constellation()).to_graph(&mut g);
        let nu = g.leaf(Tensor::column(&xi.nu));
        let rho = g.leaf(Tensor::column(&xi.rho));
        let mut rng = stream(2, "e", 0);
        let mut noise = || standard_normal_matrix(5, 2, &mut rng);
        let (a, b) = bayes_adapt_graph(
            &mut g,
            &model,
            &data,
            4,
            (nu, rho),
            &cfg,
            3,
            false,
            &mut noise,
        )
        .unwrap();
        for (x, y) in g.value(a).data().iter().zip(&plain.nu) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in g.value(b).data().iter().zip(&plain.rho) {
            assert!((x - y).abs() < 1e-12);
        }

        let phi = freq_adapt(&model, &train, &xi.nu, 2e-3, 3).unwrap();
        let mut g = Graph::new();
        let data = Batch::new(&train, &model.constellation()).to_graph(&mut g);
        let p = g.leaf(Tensor::column(&xi.nu));
        let out = freq_adapt_graph(&mut g, &model, &data, p, 2e-3, 3, false).unwrap();
        for (x, y) in g.value(out).data().iter().zip(&phi) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_free_energy_is_data_term() {
        let model = Model::equalizer(150.0);
        let train = eq_frame(3, 4);
        let nu = vec![0.7, 0.1];
        let q = VariationalParams::isotropic(nu.clone(), -1000.0);
        let e = standard_normal_matrix(4, 2, &mut stream(3, "e", 0));
        let f = free_energy_estimate(&model, &train, &q, &q, &e, 0.0).unwrap();
        let l = train_log_loss(&model, &train, &nu).unwrap();
        assert!((f - 4.0 * l).abs() < 1e-8);
    }

    #[test]
    fn free_energy_recomposes_from_samples() {
        let model = Model::equalizer(150.0);
        let train = eq_frame(4, 4);
        let q = VariationalParams::new(vec![0.2, 0.9], vec![-0.7, -1.1]);
        let p = VariationalParams::new(vec![0.0, 0.5], vec![-0.5, -0.5]);
        let e = standard_normal_matrix(6, 2, &mut stream(4, "e", 0));
        let f = free_energy_estimate(&model, &train, &q, &p, &e, 0.1).unwrap();
        let lhat: f64 = (0..6)
            .map(|r| train_log_loss(&model, &train, &q.reparametrize(e.row(r))).unwrap())
            .sum::<f64>()
            / 6.0;
        let expect = 4.0 * lhat + 0.1 * crate::models::kl_gaussians(&q, &p);
        assert!((f - expect).abs() < 1e-10);
    }

    #[test]
    fn single_quadratic_step() {
        // Equalizer loss with y = (1, 0), target 1 reduces to β/2 (φ₀ − 1)² + const.
        let beta = 1.0;
        let model = Model::equalizer(beta);
        let s5 = 5f64.sqrt();
        // PAM symbol index 3 has value 3/√5; scale y so that the optimum is φ₀ = 1.
        let train = vec![Sample {
            y: [3.0 / s5, 0.0],
            x: 3,
        }];
        let phi = freq_adapt(&model, &train, &[0.0, 0.0], 0.1, 1).unwrap();
        // ∇ = −(x − φᵀy)·y = −(9/5) at φ = 0.
        assert!((phi[0] - 0.1 * 9.0 / 5.0).abs() < 1e-15);
        assert_eq!(phi[1], 0.0);
    }

    #[test]
    fn burnin_with_no_second_phase_is_plain_adaptation() {
        let model = Model::equalizer(150.0);
        let pilots = eq_frame(5, 8);
        let xi = Hyperparams::Freq {
            init: vec![0.1, 0.2],
        };
        let cfg = BurnInConfig {
            eta: 2e-3,
            i: 2,
            i_star: 2,
            n_tr: 4,
            r: 1,
            kl_coeff: 1.0,
        };
        let mut rng = stream(5, "b", 0);
        let Adapted::Point(phi) =
            metatest_adapt_burnin(&model, &pilots, &xi, &cfg, &mut rng).unwrap()
        else {
            panic!("expected a point estimate")
        };
        let mut shuffled = pilots.clone();
        shuffled.shuffle(&mut stream(5, "b", 0));
        let expect = freq_adapt(&model, &shuffled[..4], &[0.1, 0.2], 2e-3, 2).unwrap();
        assert_eq!(phi, expect);
    }

    #[test]
    fn burnin_second_phase_uses_reduced_rate() {
        let model = Model::equalizer(150.0);
        let pilots = eq_frame(6, 8);
        let xi = Hyperparams::Freq {
            init: vec![0.1, 0.2],
        };
        let cfg = BurnInConfig {
            eta: 2e-3,
            i: 1,
            i_star: 3,
            n_tr: 4,
            r: 1,
            kl_coeff: 1.0,
        };
        let Adapted::Point(phi) =
            metatest_adapt_burnin(&model, &pilots, &xi, &cfg, &mut stream(6, "b", 0)).unwrap()
        else {
            panic!("expected a point estimate")
        };
        let mut shuffled = pilots.clone();
        shuffled.shuffle(&mut stream(6, "b", 0));
        let a = freq_adapt(&model, &shuffled[..4], &[0.1, 0.2], 2e-3, 1).unwrap();
        let b = freq_adapt(&model, &pilots, &a, 2e-3 * 0.05, 2).unwrap();
        assert_eq!(phi, b);
    }
}
