//! Symbol error rate, mean squared error and calibration statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            expected: a,
            got: b,
        });
    }
    if a == 0 {
        return Err(Error::EmptyDataset("metric"));
    }
    Ok(())
}

/// Fraction of mismatched decisions.
pub fn ser(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(truth.len(), pred.len())?;
    let errors = pred.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(errors as f64 / truth.len() as f64)
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(truth.len(), pred.len())?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / truth.len() as f64)
}

/// Reliability statistics over `M` equal-width bins `((m−1)/M, m/M]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub m: usize,
    pub n: usize,
    pub bin_counts: Vec<usize>,
    /// Within-bin accuracy (0 for empty bins).
    pub bin_acc: Vec<f64>,
    /// Within-bin mean confidence (0 for empty bins).
    pub bin_conf: Vec<f64>,
    pub ece: f64,
}

/// Zero-based bin of a confidence; 0 belongs to the first bin.
pub fn bin_index(conf: f64, m: usize) -> usize {
    let mf = m as f64;
    let mut k = (conf * mf).ceil() as usize;
    // Correct for rounding in conf·M near bin edges.
    while k > 1 && conf <= (k - 1) as f64 / mf {
        k -= 1;
    }
    while k < m && conf > k as f64 / mf {
        k += 1;
    }
    k.clamp(1, m) - 1
}

pub fn calibration_report(
    confidences: &[f64],
    correct: &[bool],
    m: usize,
) -> Result<CalibrationReport> {
    if confidences.len() != correct.len() {
        return Err(Error::Dimension {
            expected: confidences.len(),
            got: correct.len(),
        });
    }
    if m == 0 {
        return Err(Error::Config("calibration needs at least one bin".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Config(format!("confidence {c} outside [0, 1]")));
    }
    let mut counts = vec![0usize; m];
    let mut hits = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, m);
        counts[b] += 1;
        hits[b] += ok as usize;
        conf_sum[b] += c;
    }
    let n = confidences.len();
    let mut acc = vec![0.0; m];
    let mut conf = vec![0.0; m];
    let mut ece = 0.0;
    for b in 0..m {
        if counts[b] > 0 {
            acc[b] = hits[b] as f64 / counts[b] as f64;
            conf[b] = conf_sum[b] / counts[b] as f64;
            ece += counts[b] as f64 * (acc[b] - conf[b]).abs();
        }
    }
    if n > 0 {
        ece /= n as f64;
    }
    Ok(CalibrationReport {
        m,
        n,
        bin_counts: counts,
        bin_acc: acc,
        bin_conf: conf,
        ece,
    })
}

impl CalibrationReport {
    pub fn bin_bounds(&self, b: usize) -> (f64, f64) {
        (b as f64 / self.m as f64, (b + 1) as f64 / self.m as f64)
    }

    /// Bins where the mean confidence exceeds the accuracy, over populated bins.
    pub fn overconfident_bins(&self) -> (usize, usize) {
        let populated: Vec<usize> = (0..self.m).filter(|&b| self.bin_counts[b] > 0).collect();
        let over = populated
            .iter()
            .filter(|&&b| self.bin_conf[b] > self.bin_acc[b])
            .count();
        (over, populated.len())
    }
}
