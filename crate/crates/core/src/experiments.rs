//! End-to-end pipelines behind the `run` subcommand and their artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::active::{
    active_loop, score, select_next_param, AcquisitionHistory, AcquisitionMode, ActiveConfig,
    PolarGrid,
};
use crate::adaptation::bayes_adapt;
use crate::baselines::{conventional_learn, lmmse_ml_demod};
use crate::channel::{
    generate_frame, sample_demod_state, sample_eq_state, ChannelState, FrameDataset, SymbolSource,
};
use crate::config::{Config, Experiment, Profile, Task};
use crate::error::{Error, Result};
use crate::io::write_json;
use crate::meta::{decide, meta_test_eval, meta_train, FramePredictions, MetaMode};
use crate::metrics::{calibration_report, ser, CalibrationReport};
use crate::models::{init_hyperparams, point_demod_probs, Batch, Model};
use crate::rng::{derive_seed, stream};

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub profile: Profile,
    pub master_seed: u64,
    /// Keys that differ from the profile defaults, as supplied.
    pub overrides: Value,
    pub config: Config,
}

impl ExperimentConfig {
    pub fn new(
        experiment: Experiment,
        profile: Profile,
        master_seed: u64,
        overrides: Option<Value>,
    ) -> Result<Self> {
        let base = Config::for_profile(profile, experiment.task());
        let overrides = overrides.unwrap_or_else(|| json!({}));
        let config = base.merged(&overrides)?;
        Ok(Self {
            experiment,
            profile,
            master_seed,
            overrides,
            config,
        })
    }
}

/// Seed of repetition `k`.
pub fn repetition_seed(master: u64, k: usize) -> u64 {
    derive_seed(master, "repetition", k as u64)
}

/// A named CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(&self.name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(path)
    }
}

/// Polar grid of score values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringMap {
    pub grid: PolarGrid,
    /// `(φ₁, φ₂, s)` ordered by angle, then radius.
    pub points: Vec<[f64; 3]>,
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub tables: Vec<Table>,
    pub summary: Value,
    /// Pooled calibration per method (demodulation runs).
    pub reliability: Vec<(String, CalibrationReport)>,
    pub scoring_map: Option<ScoringMap>,
    pub histories: Vec<AcquisitionHistory>,
}

impl RunArtifact {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            config: config.clone(),
            config_hash: config.config.hash(),
            tables: Vec::new(),
            summary: Value::Null,
            reliability: Vec::new(),
            scoring_map: None,
            histories: Vec::new(),
        }
    }

    /// Writes the configuration snapshot, tables, summary, histories and the
    /// plot data relevant to the experiment.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let snapshot = json!({
            "experiment": self.config.experiment,
            "profile": self.config.profile,
            "master_seed": self.config.master_seed,
            "overrides": self.config.overrides,
            "config": self.config.config,
            "config_hash": self.config_hash,
        });
        let path = dir.join("config.json");
        write_json(&path, &snapshot)?;
        written.push(path);
        for t in &self.tables {
            written.push(t.write(dir)?);
        }
        let path = dir.join("summary.json");
        write_json(&path, &self.summary)?;
        written.push(path);
        if !self.histories.is_empty() {
            let path = dir.join("history.json");
            write_json(&path, &self.histories)?;
            written.push(path);
        }
        match self.config.experiment {
            Experiment::DemodReliability => {
                written.extend(emit_plot_data(self, "reliability", dir)?)
            }
            Experiment::EqScoringMap => written.extend(emit_plot_data(self, "scoring-map", dir)?),
            _ => {}
        }
        Ok(written)
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Writes flat plot data for `kind` (`reliability` or `scoring-map`).
pub fn emit_plot_data(artifact: &RunArtifact, kind: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    match kind {
        "reliability" => {
            if artifact.reliability.is_empty() {
                return Err(Error::Config("run has no calibration data".into()));
            }
            let mut out = Vec::new();
            for (method, report) in &artifact.reliability {
                let mut t = Table::new(
                    &format!("reliability_{method}.csv"),
                    &[
                        "bin",
                        "bin_lo",
                        "bin_hi",
                        "count",
                        "acc",
                        "conf",
                        "frequency",
                    ],
                );
                let n = report.n.max(1) as f64;
                for b in 0..report.m {
                    let (lo, hi) = report.bin_bounds(b);
                    t.push(vec![
                        (b + 1).to_string(),
                        fmt(lo),
                        fmt(hi),
                        report.bin_counts[b].to_string(),
                        fmt(report.bin_acc[b]),
                        fmt(report.bin_conf[b]),
                        fmt(report.bin_counts[b] as f64 / n),
                    ]);
                }
                out.push(t.write(dir)?);
            }
            Ok(out)
        }
        "scoring-map" => {
            let map = artifact
                .scoring_map
                .as_ref()
                .ok_or_else(|| Error::Config("run has no scoring map".into()))?;
            let mut t = Table::new("scoring_map.csv", &["phi1", "phi2", "s"]);
            for p in &map.points {
                t.push(p.iter().map(|v| fmt(*v)).collect());
            }
            Ok(vec![t.write(dir)?])
        }
        other => Err(Error::Config(format!(
            "unknown plot kind {other:?} (expected reliability or scoring-map)"
        ))),
    }
}

/// Meta-training frames of a repetition; the first `t` of a fixed sequence.
pub fn training_frames(cfg: &Config, seed: u64, t: usize) -> Vec<FrameDataset> {
    (0..t)
        .map(|i| {
            let mut rng = stream(seed, "train-frame", i as u64);
            let state = random_state(cfg.task, &mut rng);
            generate_frame(
                &state,
                cfg.n_tr,
                cfg.n_te,
                cfg.noise(),
                SymbolSource::Uniform,
                &mut rng,
            )
        })
        .collect()
}

/// Meta-test frames of a repetition.
pub fn test_frames(cfg: &Config, seed: u64) -> Vec<FrameDataset> {
    (0..cfg.test_frames)
        .map(|i| {
            let mut rng = stream(seed, "test-frame", i as u64);
            let state = random_state(cfg.task, &mut rng);
            generate_frame(
                &state,
                cfg.n_star_tr,
                cfg.n_star_te,
                cfg.noise(),
                SymbolSource::Uniform,
                &mut rng,
            )
        })
        .collect()
}

fn random_state<R: rand::Rng + ?Sized>(task: Task, rng: &mut R) -> ChannelState {
    match task {
        Task::Demod => ChannelState::Demod(sample_demod_state(rng)),
        Task::Equalizer => ChannelState::Equalizer(sample_eq_state(rng)),
    }
}

/// Hard decisions, confidences and truth of one demodulation method.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DemodOutcome {
    pub truth: Vec<usize>,
    pub pred: Vec<usize>,
    pub confidence: Vec<f64>,
}

impl DemodOutcome {
    fn extend(&mut self, truth: &[usize], pred: &[usize], confidence: &[f64]) {
        self.truth.extend_from_slice(truth);
        self.pred.extend_from_slice(pred);
        self.confidence.extend_from_slice(confidence);
    }

    fn from_frames(preds: &[FramePredictions]) -> Self {
        let mut out = DemodOutcome::default();
        for p in preds {
            if let FramePredictions::Demod {
                truth,
                pred,
                confidence,
            } = p
            {
                out.extend(truth, pred, confidence);
            }
        }
        out
    }

    pub fn correct(&self) -> Vec<bool> {
        self.truth
            .iter()
            .zip(&self.pred)
            .map(|(a, b)| a == b)
            .collect()
    }

    pub fn ser(&self) -> Result<f64> {
        ser(&self.pred, &self.truth)
    }

    pub fn calibration(&self, m: usize) -> Result<CalibrationReport> {
        calibration_report(&self.confidence, &self.correct(), m)
    }
}

/// Demodulation methods in reporting order.
pub const DEMOD_METHODS: [&str; 4] = ["bayes", "freq", "lmmse", "conventional"];

/// All demodulation methods on one repetition and meta-training size.
#[derive(Debug, Clone, PartialEq)]
pub struct DemodPoint {
    pub repetition: usize,
    pub seed: u64,
    pub t: usize,
    pub outcomes: BTreeMap<String, DemodOutcome>,
}

/// Meta-trains both variants on `t` frames and evaluates every method on the
/// repetition's meta-test frames.
pub fn demod_point(cfg: &Config, repetition: usize, seed: u64, t: usize) -> Result<DemodPoint> {
    let model = cfg.model();
    let Model::Demodulator(shape) = &model else {
        return Err(Error::Config(
            "demodulation pipeline needs the demodulator".into(),
        ));
    };
    let train = training_frames(cfg, seed, t);
    let test = test_frames(cfg, seed);
    let mut outcomes = BTreeMap::new();
    for mode in [MetaMode::Freq, MetaMode::Bayes] {
        let bayes = mode == MetaMode::Bayes;
        let xi0 = init_hyperparams(
            &model,
            bayes,
            &mut stream(seed, &format!("xi-{}", mode.name()), t as u64),
        );
        let mcfg = cfg.meta_train_config(
            derive_seed(seed, &format!("meta-{}", mode.name()), t as u64),
            t,
        );
        let (xi, _) = meta_train(&model, &train, xi0, &mcfg)?;
        let tcfg = cfg.meta_test_config(derive_seed(
            seed,
            &format!("test-{}", mode.name()),
            t as u64,
        ));
        let preds = meta_test_eval(&model, &xi, mode, &test, &tcfg)?;
        outcomes.insert(mode.name().to_string(), DemodOutcome::from_frames(&preds));
    }
    let constellation = model.constellation();
    let mut conv = DemodOutcome::default();
    let mut lmmse = DemodOutcome::default();
    for (i, f) in test.iter().enumerate() {
        let batch = Batch::new(&f.test, &constellation);
        let phi = conventional_learn(
            &model,
            &f.train,
            cfg.eta,
            cfg.i_star,
            &mut stream(seed, "conventional", i as u64),
        )?;
        let (pred, conf) = decide(&point_demod_probs(shape, &batch.inputs, &phi));
        conv.extend(&batch.labels, &pred, &conf);
        let payload: Vec<[f64; 2]> = f.test.iter().map(|s| s.y).collect();
        let snr = f.snr.unwrap_or(f64::INFINITY);
        let (pred, conf) = lmmse_ml_demod(&f.train, &payload, &constellation, snr)?;
        lmmse.extend(&batch.labels, &pred, &conf);
    }
    outcomes.insert("conventional".into(), conv);
    outcomes.insert("lmmse".into(), lmmse);
    Ok(DemodPoint {
        repetition,
        seed,
        t,
        outcomes,
    })
}

/// Every (repetition, t) point of the demodulation study.
pub fn demod_study(cfg: &Config, master: u64) -> Result<Vec<DemodPoint>> {
    let mut points = Vec::new();
    for k in 0..cfg.seeds {
        let seed = repetition_seed(master, k);
        for &t in &cfg.t_grid {
            points.push(demod_point(cfg, k, seed, t)?);
        }
    }
    Ok(points)
}

fn demod_tables(
    points: &[DemodPoint],
    cfg: &Config,
    metric: &str,
    f: impl Fn(&DemodOutcome) -> Result<f64>,
) -> Result<(Table, Table, Value)> {
    let mut raw = Table::new(
        &format!("{metric}_vs_t.csv"),
        &["method", "t", "seed", metric],
    );
    let mut agg = Table::new(
        &format!("{metric}_vs_t_summary.csv"),
        &["method", "t", "mean", "std", "n"],
    );
    let mut summary = serde_json::Map::new();
    for method in DEMOD_METHODS {
        let mut per_t = serde_json::Map::new();
        for &t in &cfg.t_grid {
            let mut vals = Vec::new();
            for p in points.iter().filter(|p| p.t == t) {
                let v = f(&p.outcomes[method])?;
                raw.push(vec![
                    method.into(),
                    t.to_string(),
                    p.repetition.to_string(),
                    fmt(v),
                ]);
                vals.push(v);
            }
            let (m, s) = mean_std(&vals);
            agg.push(vec![
                method.into(),
                t.to_string(),
                fmt(m),
                fmt(s),
                vals.len().to_string(),
            ]);
            per_t.insert(t.to_string(), json!({"mean": m, "std": s}));
        }
        summary.insert(method.into(), Value::Object(per_t));
    }
    Ok((raw, agg, Value::Object(summary)))
}

/// Calibration pooled over repetitions at the largest `t`.
pub fn pooled_reliability(
    points: &[DemodPoint],
    m: usize,
) -> Result<Vec<(String, CalibrationReport)>> {
    let t_max = points
        .iter()
        .map(|p| p.t)
        .max()
        .ok_or(Error::EmptyDataset("reliability"))?;
    DEMOD_METHODS
        .iter()
        .map(|method| {
            let mut pooled = DemodOutcome::default();
            for p in points.iter().filter(|p| p.t == t_max) {
                let o = &p.outcomes[*method];
                pooled.extend(&o.truth, &o.pred, &o.confidence);
            }
            Ok((method.to_string(), pooled.calibration(m)?))
        })
        .collect()
}

/// Settings of one active or passive repetition.
pub fn active_config(cfg: &Config, mode: AcquisitionMode, seed: u64) -> ActiveConfig {
    ActiveConfig {
        mode,
        t_init: cfg.t_init,
        budget: cfg.budget,
        noise: cfg.noise(),
        frame_len: cfg.n_tr + cfg.n_te,
        meta: cfg.meta_train_config(seed, 0),
        posterior_steps: cfg.posterior_steps,
        select: cfg.select,
        test: cfg.meta_test_config(derive_seed(seed, "active-test", 0)),
        seed,
    }
}

/// Runs `seeds` repetitions of the acquisition loop in `mode`. Repetition
/// `k` shares its meta-test frames with the other mode.
pub fn active_runs(
    cfg: &Config,
    mode: AcquisitionMode,
    master: u64,
    seeds: usize,
) -> Result<Vec<AcquisitionHistory>> {
    let model = cfg.model();
    (0..seeds)
        .map(|k| {
            let seed = repetition_seed(master, k);
            let test = test_frames(cfg, seed);
            active_loop(&model, &test, &active_config(cfg, mode, seed)).map(|(_, h)| h)
        })
        .collect()
}

/// Mean and standard deviation of the meta-test MSE per frame count.
pub fn mse_summary(histories: &[AcquisitionHistory]) -> Vec<(usize, f64, f64)> {
    let Some(first) = histories.first() else {
        return Vec::new();
    };
    first
        .mse_curve
        .iter()
        .enumerate()
        .map(|(i, &(t, _))| {
            let vals: Vec<f64> = histories.iter().map(|h| h.mse_curve[i].1).collect();
            let (m, s) = mean_std(&vals);
            (t, m, s)
        })
        .collect()
}

fn run_active_vs_passive(cfg: &Config, master: u64, art: &mut RunArtifact) -> Result<()> {
    let mut raw = Table::new("active_vs_passive.csv", &["mode", "t", "seed", "mse"]);
    let mut agg = Table::new(
        "active_vs_passive_summary.csv",
        &["mode", "t", "mean", "std"],
    );
    let mut summary = serde_json::Map::new();
    for mode in [AcquisitionMode::Active, AcquisitionMode::Passive] {
        let hs = active_runs(cfg, mode, master, cfg.seeds)?;
        for (k, h) in hs.iter().enumerate() {
            for &(t, m) in &h.mse_curve {
                raw.push(vec![
                    mode.name().into(),
                    t.to_string(),
                    k.to_string(),
                    fmt(m),
                ]);
            }
        }
        let rows = mse_summary(&hs);
        for &(t, m, s) in &rows {
            agg.push(vec![mode.name().into(), t.to_string(), fmt(m), fmt(s)]);
        }
        summary.insert(
            mode.name().into(),
            Value::Array(
                rows.iter()
                    .map(|(t, m, s)| json!({"t": t, "mean": m, "std": s}))
                    .collect(),
            ),
        );
        art.histories.extend(hs);
    }
    art.tables.push(raw);
    art.tables.push(agg);
    art.summary = Value::Object(summary);
    Ok(())
}

fn run_scoring_map(cfg: &Config, master: u64, art: &mut RunArtifact) -> Result<()> {
    let model = cfg.model();
    let seed = repetition_seed(master, 0);
    let frames = training_frames(cfg, seed, cfg.t_init);
    let xi0 = init_hyperparams(
        &model,
        true,
        &mut stream(seed, "xi-bayes", cfg.t_init as u64),
    );
    let mcfg = cfg.meta_train_config(
        derive_seed(seed, "meta-bayes", cfg.t_init as u64),
        cfg.t_init,
    );
    let (xi, _) = meta_train(&model, &frames, xi0, &mcfg)?;
    let prior = xi.as_bayes()?;
    let posts = frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let pilots: Vec<_> = f.samples().copied().collect();
            let mut rng = stream(seed, "map-posterior", i as u64);
            bayes_adapt(
                &model,
                &pilots,
                prior,
                &cfg.step_config(),
                cfg.posterior_steps,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = cfg.select.grid;
    let points = grid
        .points()
        .map(|p| Ok([p[0], p[1], score(&p, &posts)?]))
        .collect::<Result<Vec<_>>>()?;
    let (phi, s) = select_next_param(&posts, &cfg.select)?;
    let c = crate::active::invert_channel_equalizer(&phi)?;
    art.summary = json!({
        "frames": frames.iter().map(|f| f.state).collect::<Vec<_>>(),
        "posteriors": posts,
        "selected_phi": phi,
        "selected_score": s,
        "next_channel": c.c,
    });
    art.scoring_map = Some(ScoringMap { grid, points });
    Ok(())
}

/// Executes the configured pipeline.
pub fn run_experiment(ec: &ExperimentConfig) -> Result<RunArtifact> {
    let cfg = &ec.config;
    if cfg.task != ec.experiment.task() {
        return Err(Error::Config(format!(
            "experiment {} needs a {:?} configuration",
            ec.experiment.name(),
            ec.experiment.task()
        )));
    }
    let mut art = RunArtifact::new(ec);
    match ec.experiment {
        Experiment::DemodSerVsT | Experiment::DemodEceVsT | Experiment::DemodReliability => {
            let points = demod_study(cfg, ec.master_seed)?;
            let m = cfg.m_bins;
            let (raw, agg, ser_summary) = demod_tables(&points, cfg, "ser", |o| o.ser())?;
            let (eraw, eagg, ece_summary) =
                demod_tables(&points, cfg, "ece", |o| Ok(o.calibration(m)?.ece))?;
            match ec.experiment {
                Experiment::DemodSerVsT => art.tables.extend([raw, agg]),
                Experiment::DemodEceVsT => art.tables.extend([eraw, eagg]),
                _ => {}
            }
            art.reliability = pooled_reliability(&points, m)?;
            let rel: serde_json::Map<String, Value> = art
                .reliability
                .iter()
                .map(|(k, r)| {
                    let (over, populated) = r.overconfident_bins();
                    (k.clone(), json!({"ece": r.ece, "overconfident_bins": over, "populated_bins": populated}))
                })
                .collect();
            art.summary =
                json!({"ser": ser_summary, "ece": ece_summary, "pooled_reliability": rel});
        }
        Experiment::EqScoringMap => run_scoring_map(cfg, ec.master_seed, &mut art)?,
        Experiment::EqActiveVsPassive => run_active_vs_passive(cfg, ec.master_seed, &mut art)?,
    }
    Ok(art)
}
