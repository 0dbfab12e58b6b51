use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use metademod::active::AcquisitionMode;
use metademod::adaptation::Adapted;
use metademod::baselines::{conventional_learn, lmmse_ml_demod};
use metademod::channel::FrameDataset;
use metademod::config::{Config, Experiment, Profile, Task};
use metademod::experiments::{
    active_runs, mse_summary, run_experiment, test_frames, training_frames, ExperimentConfig,
};
use metademod::io::{
    read_frames, reliability_rows, write_csv, write_frames, write_json, Checkpoint, CheckpointMeta,
    PredictionTable,
};
use metademod::meta::{meta_test_eval, meta_train, predict_frame, FramePredictions, MetaMode};
use metademod::metrics::{calibration_report, mse, ser};
use metademod::models::{init_hyperparams, Model};
use metademod::rng::{derive_seed, stream};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "metademod",
    version,
    about = "Bayesian (active) meta-learning for few-pilot receivers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file with parameter overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    profile: ProfileArg,
    /// Task when the configuration file does not name one.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate frames as JSON lines.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Frame sizes of meta-training (`train`) or meta-test (`test`) frames.
        #[arg(long, value_enum, default_value = "test")]
        role: RoleArg,
        /// Number of frames (defaults to the configured count for the role).
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train hyperparameters and save a checkpoint.
    MetaTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        mode: MetaModeArg,
        /// Meta-training frames (JSON lines); generated when omitted.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Number of generated frames (defaults to the largest of `t_grid`).
        #[arg(long)]
        t: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-iteration trace (JSON).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Adapt on each frame's pilots and predict its payload.
    MetaTest {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        mode: TestModeArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Frames as JSON lines, or a generator configuration (JSON object).
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Active or passive meta-learning on the equalizer.
    Active {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        tinit: Option<usize>,
        #[arg(long, value_enum, default_value = "active")]
        mode: AcquisitionArg,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error rate, MSE and reliability data from a prediction CSV.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a named experiment end to end.
    Run {
        #[arg(long)]
        experiment: String,
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// JSON file with parameter overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Demod,
    Equalizer,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Demod => Task::Demod,
            TaskArg::Equalizer => Task::Equalizer,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetaModeArg {
    Freq,
    Bayes,
}

impl From<MetaModeArg> for MetaMode {
    fn from(m: MetaModeArg) -> Self {
        match m {
            MetaModeArg::Freq => MetaMode::Freq,
            MetaModeArg::Bayes => MetaMode::Bayes,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TestModeArg {
    Freq,
    Bayes,
    Conventional,
    Lmmse,
}

#[derive(Clone, Copy, ValueEnum)]
enum AcquisitionArg {
    Active,
    Passive,
}

fn read_json(path: &Path) -> Result<Value> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn resolve_with(profile: Profile, task: Option<Task>, overrides: Option<Value>) -> Result<Config> {
    let overrides = overrides.unwrap_or_else(|| json!({}));
    let task = match overrides.get("task") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => task.unwrap_or(Task::Demod),
    };
    Ok(Config::for_profile(profile, task).merged(&overrides)?)
}

fn resolve(args: &ConfigArgs) -> Result<Config> {
    let overrides = args.config.as_deref().map(read_json).transpose()?;
    resolve_with(args.profile.into(), args.task.map(Into::into), overrides)
}

/// Frames from a JSON-lines file, or generated from a configuration object.
fn load_test_frames(
    path: Option<&Path>,
    cfg: &Config,
    args: &ConfigArgs,
) -> Result<(Vec<FrameDataset>, Config)> {
    let Some(path) = path else {
        return Ok((test_frames(cfg, args.seed), cfg.clone()));
    };
    if let Ok(frames) = read_frames(path) {
        if !frames.is_empty() {
            return Ok((frames, cfg.clone()));
        }
    }
    let gen = resolve_with(
        args.profile.into(),
        args.task.map(Into::into),
        Some(read_json(path)?),
    )
    .with_context(|| {
        format!(
            "{} is neither frames nor a generator configuration",
            path.display()
        )
    })?;
    Ok((test_frames(&gen, args.seed), gen))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate {
            cfg,
            role,
            frames,
            out,
        } => {
            let c = resolve(&cfg)?;
            let data = match role {
                RoleArg::Train => training_frames(
                    &c,
                    cfg.seed,
                    frames.unwrap_or(*c.t_grid.iter().max().unwrap_or(&1)),
                ),
                RoleArg::Test => {
                    let mut c = c.clone();
                    if let Some(n) = frames {
                        c.test_frames = n;
                    }
                    test_frames(&c, cfg.seed)
                }
            };
            write_frames(&out, &data)?;
            eprintln!("wrote {} frames to {}", data.len(), out.display());
        }
        Command::MetaTrain {
            cfg,
            mode,
            frames,
            t,
            out,
            trace,
        } => {
            let c = resolve(&cfg)?;
            let model = c.model();
            let data = match frames {
                Some(p) => read_frames(&p)?,
                None => training_frames(
                    &c,
                    cfg.seed,
                    t.unwrap_or(*c.t_grid.iter().max().unwrap_or(&1)),
                ),
            };
            let mode: MetaMode = mode.into();
            let xi0 = init_hyperparams(
                &model,
                mode == MetaMode::Bayes,
                &mut stream(cfg.seed, "xi", 0),
            );
            let mcfg = c.meta_train_config(derive_seed(cfg.seed, "meta", 0), data.len());
            let (xi, tr) = meta_train(&model, &data, xi0, &mcfg)?;
            let meta = CheckpointMeta {
                seed: cfg.seed,
                config_hash: c.hash(),
            };
            Checkpoint::new(&xi, &model, meta).save(&out)?;
            if let Some(p) = trace {
                write_json(&p, &tr)?;
            }
            let last = tr.last().map_or(f64::NAN, |e| e.meta_loss);
            eprintln!(
                "meta-trained {} on {} frames; final meta-loss {last:.4}",
                mode.name(),
                data.len()
            );
        }
        Command::MetaTest {
            cfg,
            mode,
            checkpoint,
            frames,
            out,
        } => {
            let c = resolve(&cfg)?;
            let (data, c) = load_test_frames(frames.as_deref(), &c, &cfg)?;
            let preds = match mode {
                TestModeArg::Freq | TestModeArg::Bayes => {
                    let path =
                        checkpoint.context("--checkpoint is required for meta-learned modes")?;
                    let ck = Checkpoint::load(&path)?;
                    let xi = ck.hyperparams()?;
                    let expected = match mode {
                        TestModeArg::Freq => MetaMode::Freq,
                        _ => MetaMode::Bayes,
                    };
                    meta_test_eval(
                        &ck.shape,
                        &xi,
                        expected,
                        &data,
                        &c.meta_test_config(cfg.seed),
                    )?
                }
                TestModeArg::Conventional => {
                    let model = c.model();
                    data.iter()
                        .enumerate()
                        .map(|(i, f)| {
                            let phi = conventional_learn(
                                &model,
                                &f.train,
                                c.eta,
                                c.i_star,
                                &mut stream(cfg.seed, "conventional", i as u64),
                            )?;
                            Ok(predict_frame(
                                &model,
                                &Adapted::Point(phi),
                                f,
                                1,
                                &mut stream(cfg.seed, "unused", 0),
                            ))
                        })
                        .collect::<metademod::Result<Vec<_>>>()?
                }
                TestModeArg::Lmmse => {
                    let model = c.model();
                    let Model::Demodulator(_) = model else {
                        bail!("the LMMSE receiver is defined for the demodulation task only");
                    };
                    let constellation = model.constellation();
                    data.iter()
                        .map(|f| {
                            let payload: Vec<[f64; 2]> = f.test.iter().map(|s| s.y).collect();
                            let (pred, confidence) = lmmse_ml_demod(
                                &f.train,
                                &payload,
                                &constellation,
                                f.snr.unwrap_or(f64::INFINITY),
                            )?;
                            Ok(FramePredictions::Demod {
                                truth: f.test.iter().map(|s| s.x).collect(),
                                pred,
                                confidence,
                            })
                        })
                        .collect::<metademod::Result<Vec<_>>>()?
                }
            };
            PredictionTable::from_frames(&preds)?.write(&out)?;
            eprintln!(
                "wrote predictions for {} frames to {}",
                preds.len(),
                out.display()
            );
        }
        Command::Active {
            cfg,
            budget,
            tinit,
            mode,
            seeds,
            out,
        } => {
            let mut c = resolve_with(
                cfg.profile.into(),
                Some(Task::Equalizer),
                cfg.config.as_deref().map(read_json).transpose()?,
            )?;
            if c.task != Task::Equalizer {
                bail!("active acquisition is implemented for the equalizer task only");
            }
            if let Some(b) = budget {
                c.budget = b;
            }
            if let Some(t) = tinit {
                c.t_init = t;
            }
            c.validate()?;
            let mode = match mode {
                AcquisitionArg::Active => AcquisitionMode::Active,
                AcquisitionArg::Passive => AcquisitionMode::Passive,
            };
            let hs = active_runs(&c, mode, cfg.seed, seeds.unwrap_or(c.seeds))?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("history.json"), &hs)?;
            let rows: Vec<Value> = mse_summary(&hs)
                .into_iter()
                .map(|(t, m, s)| json!({"round": t, "mean_mse": m, "std": s}))
                .collect();
            let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
            w.write_record(["round", "mean_mse", "std"])?;
            for r in &rows {
                w.write_record([
                    r["round"].to_string(),
                    r["mean_mse"].to_string(),
                    r["std"].to_string(),
                ])?;
            }
            w.flush()?;
            eprintln!("wrote {} runs to {}", hs.len(), out.display());
        }
        Command::Report {
            predictions,
            bins,
            out,
        } => {
            std::fs::create_dir_all(&out)?;
            let summary = match PredictionTable::read(&predictions)? {
                PredictionTable::Demod(rows) => {
                    let truth: Vec<usize> = rows.iter().map(|r| r.truth_idx).collect();
                    let pred: Vec<usize> = rows.iter().map(|r| r.pred_idx).collect();
                    let conf: Vec<f64> = rows.iter().map(|r| r.confidence).collect();
                    let ok: Vec<bool> = rows.iter().map(|r| r.truth_idx == r.pred_idx).collect();
                    let report = calibration_report(&conf, &ok, bins)?;
                    write_csv(&out.join("reliability.csv"), &reliability_rows(&report))?;
                    json!({"ser": ser(&pred, &truth)?, "ece": report.ece})
                }
                PredictionTable::Equalizer(rows) => {
                    let truth: Vec<f64> = rows.iter().map(|r| r.truth).collect();
                    let mean: Vec<f64> = rows.iter().map(|r| r.pred_mean).collect();
                    json!({"mse": mse(&mean, &truth)?})
                }
            };
            write_json(&out.join("summary.json"), &summary)?;
            println!("{summary}");
        }
        Command::Run {
            experiment,
            profile,
            seed,
            out,
            config,
            print_config,
        } => {
            let experiment: Experiment = experiment.parse()?;
            let overrides = config.as_deref().map(read_json).transpose()?;
            let ec = ExperimentConfig::new(experiment, profile.into(), seed, overrides)?;
            if print_config {
                println!("{}", serde_json::to_string_pretty(&ec)?);
                return Ok(());
            }
            let art = run_experiment(&ec)?;
            let files = art.write(&out)?;
            for f in &files {
                eprintln!("wrote {}", f.display());
            }
            println!("{}", serde_json::to_string(&art.summary)?);
        }
    }
    Ok(())
}
