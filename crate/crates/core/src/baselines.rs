//! Reference receivers without meta-knowledge: conventional learning from a
//! random initialization, and LMMSE channel estimation followed by ML
//! demodulation that ignores I/Q imbalance.

use num_complex::Complex64;
use rand::Rng;

use crate::adaptation::freq_adapt;
use crate::channel::{Constellation, Sample};
use crate::error::{Error, Result};
use crate::models::{init_params, Model};

/// `I*` gradient steps at rate `η` on the pilots from a random initialization.
pub fn conventional_learn<R: Rng + ?Sized>(
    model: &Model,
    pilots: &[Sample],
    eta: f64,
    i_star: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let init = init_params(model, rng);
    if pilots.is_empty() {
        return Ok(init);
    }
    freq_adapt(model, pilots, &init, eta, i_star)
}

/// `ĥ = Σ x* y / (Σ |x|² + 1/snr)`.
pub fn lmmse_estimate(
    pilots: &[Sample],
    constellation: &Constellation,
    snr: Option<f64>,
) -> Result<Complex64> {
    if pilots.is_empty() {
        return Err(Error::EmptyDataset("LMMSE estimation"));
    }
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = snr.map_or(0.0, |s| 1.0 / s);
    for p in pilots {
        let x = constellation.point(p.x);
        num += x.conj() * Complex64::new(p.y[0], p.y[1]);
        den += x.norm_sqr();
    }
    Ok(num / den)
}

/// Hard decisions and confidences from likelihoods `∝ exp(−snr |y − ĥx|²)`
/// over the nominal constellation.
pub fn lmmse_ml_demod(
    pilots: &[Sample],
    payload: &[[f64; 2]],
    constellation: &Constellation,
    snr: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let h = lmmse_estimate(pilots, constellation, Some(snr))?;
    let centres: Vec<Complex64> = constellation.points().iter().map(|x| h * x).collect();
    let mut logw = vec![0.0; centres.len()];
    Ok(payload
        .iter()
        .map(|y| {
            let y = Complex64::new(y[0], y[1]);
            for (w, c) in logw.iter_mut().zip(&centres) {
                *w = -snr * (y - c).norm_sqr();
            }
            let k = logw
                .iter()
                .enumerate()
                .fold(0, |best, (i, &w)| if w > logw[best] { i } else { best });
            let lse = autodiff::logsumexp(&logw);
            (k, (logw[k] - lse).exp())
        })
        .unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_pilots_return_random_init() {
        let model = Model::demodulator();
        let a = conventional_learn(&model, &[], 0.1, 200, &mut stream(1, "c", 0)).unwrap();
        let b = init_params(&model, &mut stream(1, "c", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn single_noiseless_pilot_recovers_channel() {
        let c = Constellation::qam16();
        let h = Complex64::new(0.3, -1.1);
        let x = c.point(6);
        let y = h * x;
        let est = lmmse_estimate(
            &[Sample {
                y: [y.re, y.im],
                x: 6,
            }],
            &c,
            None,
        )
        .unwrap();
        assert!((est - h).norm() < 1e-15);
    }

    #[test]
    fn estimate_is_linear_in_outputs() {
        let c = Constellation::qam16();
        let pilots = vec![
            Sample {
                y: [0.2, 0.5],
                x: 1,
            },
            Sample {
                y: [-0.7, 0.1],
                x: 12,
            },
        ];
        let scaled: Vec<Sample> = pilots
            .iter()
            .map(|s| Sample {
                y: [2.5 * s.y[0], 2.5 * s.y[1]],
                x: s.x,
            })
            .collect();
        let a = lmmse_estimate(&pilots, &c, Some(63.0)).unwrap();
        let b = lmmse_estimate(&scaled, &c, Some(63.0)).unwrap();
        assert!((b - 2.5 * a).norm() < 1e-14);
    }

    #[test]
    fn ml_decisions_cover_every_sample() {
        let c = Constellation::qam16();
        let pilots: Vec<Sample> = (0..16)
            .map(|i| {
                let p = c.point(i);
                Sample {
                    y: [p.re, p.im],
                    x: i,
                }
            })
            .collect();
        let payload: Vec<[f64; 2]> = c.points().iter().map(|p| [p.re, p.im]).collect();
        let (pred, conf) = lmmse_ml_demod(&pilots, &payload, &c, 1e4).unwrap();
        assert_eq!(pred, (0..16).collect::<Vec<_>>());
        assert!(conf.iter().all(|&p| p > 0.99 && p <= 1.0));
    }
}
