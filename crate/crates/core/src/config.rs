//! Experiment configuration: paper and desk profiles, JSON overrides and the
//! content hash recorded with every artifact.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::active::SelectConfig;
use crate::adaptation::{BayesStepConfig, BurnInConfig};
use crate::channel::Noise;
use crate::error::{Error, Result};
use crate::meta::{stable_prior_rho_min, MetaOptimizer, MetaTestConfig, MetaTrainConfig};
use crate::models::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Demod,
    Equalizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    DemodSerVsT,
    DemodEceVsT,
    DemodReliability,
    EqScoringMap,
    EqActiveVsPassive,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::DemodSerVsT,
        Experiment::DemodEceVsT,
        Experiment::DemodReliability,
        Experiment::EqScoringMap,
        Experiment::EqActiveVsPassive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::DemodSerVsT => "demod_ser_vs_t",
            Experiment::DemodEceVsT => "demod_ece_vs_t",
            Experiment::DemodReliability => "demod_reliability",
            Experiment::EqScoringMap => "eq_scoring_map",
            Experiment::EqActiveVsPassive => "eq_active_vs_passive",
        }
    }

    pub fn task(self) -> Task {
        match self {
            Experiment::EqScoringMap | Experiment::EqActiveVsPassive => Task::Equalizer,
            _ => Task::Demod,
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

/// All parameters of one task. Keys mirror the symbols of the parameter
/// table; the remaining keys control experiment scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub task: Task,
    pub snr_db: f64,
    /// Inner learning rate.
    pub eta: f64,
    /// Meta learning rate.
    pub kappa: f64,
    /// Per-frame split sizes during meta-training.
    pub n_tr: usize,
    pub n_te: usize,
    /// Query samples drawn from each frame's `n_te` part per meta-iteration;
    /// `null` uses all of them.
    pub n_te_batch: Option<usize>,
    /// Pilots and payload of a meta-test frame.
    pub n_star_tr: usize,
    pub n_star_te: usize,
    #[serde(rename = "I")]
    pub i: usize,
    #[serde(rename = "I_star")]
    pub i_star: usize,
    /// Meta-iterations; `null` means one per available frame.
    #[serde(rename = "I_meta")]
    pub i_meta: Option<usize>,
    /// Ensemble size while meta-training.
    #[serde(rename = "R")]
    pub r: usize,
    /// Ensemble size at meta-test.
    #[serde(rename = "R_te")]
    pub r_te: usize,
    pub beta: f64,
    pub t_init: usize,
    /// Frames per meta-batch; `null` uses every frame.
    #[serde(rename = "B")]
    pub b: Option<usize>,
    pub kl_coeff: f64,
    #[serde(rename = "M_bins")]
    pub m_bins: usize,
    pub optimizer: MetaOptimizer,
    pub first_order: bool,
    /// Floor on the prior log standard deviations; `null` derives the
    /// stability bound from `eta`, `kl_coeff` and `n_tr`.
    pub prior_rho_min: Option<f64>,
    /// Meta-training frame counts evaluated by the demodulation experiments.
    pub t_grid: Vec<usize>,
    pub test_frames: usize,
    /// Frame budget of the active experiments.
    pub budget: usize,
    /// Independent repetitions.
    pub seeds: usize,
    /// Inner steps used to form the per-frame posteriors that are scored.
    pub posterior_steps: usize,
    pub select: SelectConfig,
}

impl Config {
    pub fn paper(task: Task) -> Self {
        match task {
            Task::Demod => Config {
                task,
                snr_db: 18.0,
                eta: 0.1,
                kappa: 1e-3,
                n_tr: 4,
                n_te: 3000,
                n_te_batch: None,
                n_star_tr: 8,
                n_star_te: 4000,
                i: 2,
                i_star: 200,
                i_meta: Some(200),
                r: 100,
                r_te: 100,
                beta: 150.0,
                t_init: 3,
                b: Some(16),
                kl_coeff: 0.1,
                m_bins: 10,
                optimizer: MetaOptimizer::Sgd,
                first_order: false,
                prior_rho_min: None,
                t_grid: vec![2, 4, 8, 16, 32, 64],
                test_frames: 50,
                budget: 10,
                seeds: 5,
                posterior_steps: 2,
                select: SelectConfig::default(),
            },
            Task::Equalizer => Config {
                task,
                snr_db: 6.0,
                eta: 2e-3,
                kappa: 5e-2,
                n_tr: 4,
                n_te: 4,
                n_te_batch: None,
                n_star_tr: 4,
                n_star_te: 1000,
                i: 2,
                i_star: 2,
                i_meta: Some(100),
                r: 100,
                r_te: 100,
                beta: 150.0,
                t_init: 3,
                b: None,
                kl_coeff: 1.0,
                m_bins: 10,
                optimizer: MetaOptimizer::adam(),
                first_order: false,
                prior_rho_min: None,
                t_grid: vec![3],
                test_frames: 100,
                budget: 10,
                seeds: 20,
                posterior_steps: 2,
                select: SelectConfig::default(),
            },
        }
    }

    /// Reduced-scale profile for laptops and CI.
    pub fn desk(task: Task) -> Self {
        let mut c = Config::paper(task);
        match task {
            Task::Demod => {
                c.n_star_te = 1000;
                c.test_frames = 10;
                c.t_grid = vec![16];
                // Plain SGD at the paper-profile meta rate does not leave the
                // uniform predictor within a desk budget.
                c.optimizer = MetaOptimizer::adam();
                c.kappa = 1e-2;
                c.i_meta = Some(1000);
                c.n_te_batch = Some(100);
                c.r = 10;
            }
            Task::Equalizer => {}
        }
        c
    }

    pub fn for_profile(profile: Profile, task: Task) -> Self {
        match profile {
            Profile::Desk => Config::desk(task),
            Profile::Paper => Config::paper(task),
        }
    }

    /// Applies the keys of a JSON object on top of `self`.
    pub fn merged(&self, overrides: &Value) -> Result<Self> {
        let Value::Object(map) = overrides else {
            return Err(Error::Config("configuration must be a JSON object".into()));
        };
        let mut base = serde_json::to_value(self)?;
        let obj = base
            .as_object_mut()
            .expect("config serializes to an object");
        for (k, v) in map {
            if !obj.contains_key(k) {
                return Err(Error::Config(format!("unknown configuration key {k:?}")));
            }
            obj.insert(k.clone(), v.clone());
        }
        let cfg: Config = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_tr == 0 || self.n_te == 0 || self.n_star_tr == 0 || self.n_star_te == 0 {
            return fail("frame split sizes must be positive");
        }
        if self.n_star_tr < self.n_tr {
            return fail("n_star_tr must be at least n_tr");
        }
        if self.i_star < self.i {
            return fail("I_star must be at least I");
        }
        if self.r == 0 || self.r_te == 0 {
            return fail("ensemble sizes must be positive");
        }
        if self.m_bins == 0 {
            return fail("M_bins must be positive");
        }
        if self.b == Some(0) {
            return fail("B must be positive");
        }
        if self.t_init == 0 || self.budget < self.t_init {
            return fail("need 1 <= t_init <= budget");
        }
        if !(self.eta > 0.0)
            || !(self.kappa >= 0.0)
            || !(self.kl_coeff >= 0.0)
            || !(self.beta > 0.0)
        {
            return fail("rates, beta and kl_coeff must be non-negative (eta, beta positive)");
        }
        Ok(())
    }

    /// Short content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::meta::hash_bytes(json.as_bytes())
    }

    pub fn model(&self) -> Model {
        match self.task {
            Task::Demod => Model::demodulator(),
            Task::Equalizer => Model::equalizer(self.beta),
        }
    }

    pub fn noise(&self) -> Noise {
        Noise::from_db(self.snr_db)
    }

    pub fn meta_train_config(&self, seed: u64, frames: usize) -> MetaTrainConfig {
        MetaTrainConfig {
            batch_size: self.b,
            inner_steps: self.i,
            eta: self.eta,
            kappa: self.kappa,
            r: self.r,
            kl_coeff: self.kl_coeff,
            meta_iters: self.i_meta.unwrap_or(frames),
            seed,
            n_tr: self.n_tr,
            n_te: self.n_te_batch.unwrap_or(self.n_te),
            first_order: self.first_order,
            optimizer: self.optimizer,
            prior_rho_min: self
                .prior_rho_min
                .unwrap_or_else(|| stable_prior_rho_min(self.eta, self.kl_coeff, self.n_tr)),
        }
    }

    pub fn burnin(&self) -> BurnInConfig {
        BurnInConfig {
            eta: self.eta,
            i: self.i,
            i_star: self.i_star,
            n_tr: self.n_tr,
            r: self.r_te,
            kl_coeff: self.kl_coeff,
        }
    }

    pub fn meta_test_config(&self, seed: u64) -> MetaTestConfig {
        MetaTestConfig {
            burnin: self.burnin(),
            r_te: self.r_te,
            seed,
        }
    }

    pub fn step_config(&self) -> BayesStepConfig {
        BayesStepConfig {
            eta: self.eta,
            r: self.r,
            kl_coeff: self.kl_coeff,
        }
    }
}
