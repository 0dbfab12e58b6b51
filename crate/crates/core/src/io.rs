//! File formats: frame data sets as JSON lines, hyperparameter checkpoints,
//! prediction CSVs and reliability tables.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::FrameDataset;
use crate::error::{Error, Result};
use crate::meta::{FramePredictions, MetaMode};
use crate::metrics::CalibrationReport;
use crate::models::{Hyperparams, Model, VariationalParams};

pub fn write_frames(path: &Path, frames: &[FrameDataset]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in frames {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<Vec<FrameDataset>> {
    let r = BufReader::new(File::open(path)?);
    let mut frames = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            frames.push(serde_json::from_str(&line)?);
        }
    }
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    #[serde(rename = "config-hash")]
    pub config_hash: String,
}

/// Serialized meta-trained hyperparameters. `rho` is absent for the
/// frequentist variant, whose initialization is stored in `nu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: MetaMode,
    pub nu: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    pub shape: Model,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(xi: &Hyperparams, model: &Model, meta: CheckpointMeta) -> Self {
        let (variant, nu, rho) = match xi {
            Hyperparams::Freq { init } => (MetaMode::Freq, init.clone(), None),
            Hyperparams::Bayes(q) => (MetaMode::Bayes, q.nu.clone(), Some(q.rho.clone())),
        };
        Self {
            variant,
            nu,
            rho,
            shape: model.clone(),
            meta,
        }
    }

    pub fn hyperparams(&self) -> Result<Hyperparams> {
        self.shape.check_dim(self.nu.len())?;
        match (self.variant, &self.rho) {
            (MetaMode::Freq, _) => Ok(Hyperparams::Freq {
                init: self.nu.clone(),
            }),
            (MetaMode::Bayes, Some(rho)) => {
                self.shape.check_dim(rho.len())?;
                Ok(Hyperparams::Bayes(VariationalParams::new(
                    self.nu.clone(),
                    rho.clone(),
                )))
            }
            (MetaMode::Bayes, None) => Err(Error::Config("Bayesian checkpoint without rho".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemodRow {
    pub frame_id: usize,
    pub sample_id: usize,
    pub truth_idx: usize,
    pub pred_idx: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqRow {
    pub truth: f64,
    pub pred_mean: f64,
}

/// Predictions read back from a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionTable {
    Demod(Vec<DemodRow>),
    Equalizer(Vec<EqRow>),
}

impl PredictionTable {
    pub fn from_frames(preds: &[FramePredictions]) -> Result<Self> {
        let mut demod = Vec::new();
        let mut eq = Vec::new();
        for (frame_id, p) in preds.iter().enumerate() {
            match p {
                FramePredictions::Demod {
                    truth,
                    pred,
                    confidence,
                } => demod.extend(truth.iter().zip(pred).zip(confidence).enumerate().map(
                    |(sample_id, ((&truth_idx, &pred_idx), &confidence))| DemodRow {
                        frame_id,
                        sample_id,
                        truth_idx,
                        pred_idx,
                        confidence,
                    },
                )),
                FramePredictions::Equalizer { truth, mean } => eq.extend(
                    truth
                        .iter()
                        .zip(mean)
                        .map(|(&truth, &pred_mean)| EqRow { truth, pred_mean }),
                ),
            }
        }
        match (demod.is_empty(), eq.is_empty()) {
            (false, true) => Ok(PredictionTable::Demod(demod)),
            (true, false) => Ok(PredictionTable::Equalizer(eq)),
            (true, true) => Err(Error::EmptyDataset("prediction table")),
            (false, false) => Err(Error::Config(
                "mixed demodulation and equalizer predictions".into(),
            )),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        match self {
            PredictionTable::Demod(rows) => rows.iter().try_for_each(|r| w.serialize(r))?,
            PredictionTable::Equalizer(rows) => rows.iter().try_for_each(|r| w.serialize(r))?,
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV, telling the two schemas apart by the header.
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.iter().any(|h| h == "truth_idx") {
            Ok(PredictionTable::Demod(
                r.deserialize().collect::<std::result::Result<_, _>>()?,
            ))
        } else if header.iter().any(|h| h == "pred_mean") {
            Ok(PredictionTable::Equalizer(
                r.deserialize().collect::<std::result::Result<_, _>>()?,
            ))
        } else {
            Err(Error::Config(format!(
                "unrecognised prediction header {:?}",
                header
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub acc: f64,
    pub conf: f64,
}

pub fn reliability_rows(report: &CalibrationReport) -> Vec<ReliabilityRow> {
    (0..report.m)
        .map(|b| {
            let (bin_lo, bin_hi) = report.bin_bounds(b);
            ReliabilityRow {
                bin_lo,
                bin_hi,
                count: report.bin_counts[b],
                acc: report.bin_acc[b],
                conf: report.bin_conf[b],
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_frame, sample_demod_state, ChannelState, Noise, SymbolSource};
    use crate::rng::stream;

    #[test]
    fn frames_round_trip_through_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.jsonl");
        let frames: Vec<_> = (0..3)
            .map(|i| {
                let mut rng = stream(1, "io", i);
                let st = ChannelState::Demod(sample_demod_state(&mut rng));
                generate_frame(
                    &st,
                    4,
                    5,
                    Noise::from_db(18.0),
                    SymbolSource::Uniform,
                    &mut rng,
                )
            })
            .collect();
        write_frames(&path, &frames).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["state", "snr", "train", "test"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(first["train"][0].as_array().unwrap().len(), 3);
        assert_eq!(read_frames(&path).unwrap(), frames);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let model = Model::equalizer(150.0);
        let xi = Hyperparams::Bayes(VariationalParams::new(vec![0.1, -0.2], vec![-1.0, -2.0]));
        let meta = CheckpointMeta {
            seed: 4,
            config_hash: "abc".into(),
        };
        let ck = Checkpoint::new(&xi, &model, meta);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.hyperparams().unwrap(), xi);
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["variant"], "bayes");
        assert_eq!(v["meta"]["config-hash"], "abc");
    }

    #[test]
    fn prediction_tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let t = PredictionTable::from_frames(&[FramePredictions::Demod {
            truth: vec![1, 2],
            pred: vec![1, 3],
            confidence: vec![0.5, 0.25],
        }])
        .unwrap();
        t.write(&path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("frame_id,sample_id,truth_idx,pred_idx,confidence"));
        assert_eq!(PredictionTable::read(&path).unwrap(), t);
        let t = PredictionTable::from_frames(&[FramePredictions::Equalizer {
            truth: vec![1.0],
            mean: vec![0.75],
        }])
        .unwrap();
        t.write(&path).unwrap();
        assert_eq!(PredictionTable::read(&path).unwrap(), t);
    }
}
