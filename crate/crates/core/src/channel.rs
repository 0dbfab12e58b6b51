//! Constellations, channel-state priors, channel application and per-frame
//! data-set generation for the demodulation and equalization experiments.
//!
//! Complex quantities are carried as `Complex64` (a real pair); received
//! samples are stored as `[f64; 2]` because that is what the predictors consume.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const MAX_AMPLITUDE_IMBALANCE: f64 = 0.15;
pub const MAX_PHASE_IMBALANCE_DEG: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstellationKind {
    Qam16,
    Pam4,
}

/// Unit-average-energy symbol alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    kind: ConstellationKind,
    points: Vec<Complex64>,
}

impl Constellation {
    pub fn new(kind: ConstellationKind) -> Self {
        let levels = [-3.0, -1.0, 1.0, 3.0];
        let points = match kind {
            // Index i ↦ I = levels[i % 4], Q = levels[i / 4].
            ConstellationKind::Qam16 => {
                let s = 1.0 / 10f64.sqrt();
                (0..16)
                    .map(|i| Complex64::new(levels[i % 4] * s, levels[i / 4] * s))
                    .collect()
            }
            ConstellationKind::Pam4 => {
                let s = 1.0 / 5f64.sqrt();
                levels.iter().map(|l| Complex64::new(l * s, 0.0)).collect()
            }
        };
        Self { kind, points }
    }

    pub fn qam16() -> Self {
        Self::new(ConstellationKind::Qam16)
    }

    pub fn pam4() -> Self {
        Self::new(ConstellationKind::Pam4)
    }

    pub fn kind(&self) -> ConstellationKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, idx: usize) -> Complex64 {
        self.points[idx]
    }

    pub fn average_energy(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.len() as f64
    }
}

/// Per-frame state of the I/Q-imbalanced fading channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemodChannelState {
    /// Amplitude imbalance ε.
    pub eps: f64,
    /// Phase imbalance δ in radians.
    pub delta: f64,
    /// Fading coefficient.
    pub h: Complex64,
}

/// Per-frame state of the real SIMO block-fading channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqChannelState {
    pub c: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChannelState {
    Demod(DemodChannelState),
    Equalizer(EqChannelState),
}

impl ChannelState {
    pub fn constellation(&self) -> Constellation {
        match self {
            ChannelState::Demod(_) => Constellation::qam16(),
            ChannelState::Equalizer(_) => Constellation::pam4(),
        }
    }
}

/// Additive noise model. `Off` gives the exact noiseless channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    Awgn { snr: f64 },
    Off,
}

impl Noise {
    pub fn from_db(snr_db: f64) -> Self {
        Noise::Awgn {
            snr: db_to_linear(snr_db),
        }
    }

    /// Linear SNR, `None` when noise is disabled.
    pub fn snr(&self) -> Option<f64> {
        match *self {
            Noise::Awgn { snr } => Some(snr),
            Noise::Off => None,
        }
    }

    /// Total noise power `1/snr` (zero when disabled).
    pub fn power(&self) -> f64 {
        match *self {
            Noise::Awgn { snr } => 1.0 / snr,
            Noise::Off => 0.0,
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// How transmitted symbol indices are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SymbolSource {
    /// i.i.d. uniform over the constellation.
    #[default]
    Uniform,
    /// Deterministic `0, 1, …, |X|−1, 0, …` pattern (debugging aid).
    Cyclic,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// ε/0.15 ~ Beta(5,2), δ/15° ~ Beta(5,2), h ~ CN(0,1).
pub fn sample_demod_state<R: Rng + ?Sized>(rng: &mut R) -> DemodChannelState {
    let beta = Beta::new(5.0, 2.0).expect("valid Beta parameters");
    let eps = MAX_AMPLITUDE_IMBALANCE * beta.sample(rng);
    let delta = MAX_PHASE_IMBALANCE_DEG.to_radians() * beta.sample(rng);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let h = Complex64::new(s * gaussian(rng), s * gaussian(rng));
    DemodChannelState { eps, delta, h }
}

/// c ~ N(0, I₂).
pub fn sample_eq_state<R: Rng + ?Sized>(rng: &mut R) -> EqChannelState {
    EqChannelState {
        c: [gaussian(rng), gaussian(rng)],
    }
}

/// Transmitter I/Q imbalance:
/// `[x̄_I; x̄_Q] = diag(1+ε, 1−ε) · [cos δ, −sin δ; −sin δ, cos δ] · [x_I; x_Q]`.
pub fn apply_iq_imbalance(x: Complex64, eps: f64, delta: f64) -> Complex64 {
    let (s, c) = delta.sin_cos();
    let i = c * x.re - s * x.im;
    let q = -s * x.re + c * x.im;
    Complex64::new((1.0 + eps) * i, (1.0 - eps) * q)
}

/// `y = h · f_IQ(x) + z`, `z ~ CN(0, 1/snr)`.
pub fn demod_channel<R: Rng + ?Sized>(
    x: Complex64,
    state: &DemodChannelState,
    noise: Noise,
    rng: &mut R,
) -> Complex64 {
    let clean = state.h * apply_iq_imbalance(x, state.eps, state.delta);
    match noise {
        Noise::Off => clean,
        Noise::Awgn { snr } => {
            let sd = (0.5 / snr).sqrt();
            clean + Complex64::new(sd * gaussian(rng), sd * gaussian(rng))
        }
    }
}

/// `y = c · x + z`, `z ~ N(0, I₂ / (2 snr))`.
pub fn eq_channel<R: Rng + ?Sized>(
    x: f64,
    state: &EqChannelState,
    noise: Noise,
    rng: &mut R,
) -> [f64; 2] {
    let clean = [state.c[0] * x, state.c[1] * x];
    match noise {
        Noise::Off => clean,
        Noise::Awgn { snr } => {
            let sd = (0.5 / snr).sqrt();
            [clean[0] + sd * gaussian(rng), clean[1] + sd * gaussian(rng)]
        }
    }
}

/// One labelled channel use: received sample and transmitted symbol index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, usize)", into = "(f64, f64, usize)")]
pub struct Sample {
    pub y: [f64; 2],
    pub x: usize,
}

impl From<(f64, f64, usize)> for Sample {
    fn from((a, b, x): (f64, f64, usize)) -> Self {
        Sample { y: [a, b], x }
    }
}

impl From<Sample> for (f64, f64, usize) {
    fn from(s: Sample) -> Self {
        (s.y[0], s.y[1], s.x)
    }
}

/// Pilots of one frame, split into a training part and a test part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDataset {
    pub state: ChannelState,
    /// Linear SNR, `None` for a noiseless frame.
    pub snr: Option<f64>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl FrameDataset {
    pub fn noise(&self) -> Noise {
        match self.snr {
            Some(snr) => Noise::Awgn { snr },
            None => Noise::Off,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All samples of the frame, train part first.
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.test)
    }

    /// Randomly divides the pooled samples into disjoint sets of `n_tr` and
    /// (at most) `n_te` samples.
    pub fn random_split<R: Rng + ?Sized>(
        &self,
        n_tr: usize,
        n_te: usize,
        rng: &mut R,
    ) -> (Vec<Sample>, Vec<Sample>) {
        let mut pool: Vec<Sample> = self.samples().copied().collect();
        pool.shuffle(rng);
        let n_tr = n_tr.min(pool.len());
        let test_end = (n_tr + n_te).min(pool.len());
        (pool[..n_tr].to_vec(), pool[n_tr..test_end].to_vec())
    }
}

/// Transmits one symbol through the channel described by `state`.
pub fn transmit<R: Rng + ?Sized>(
    state: &ChannelState,
    constellation: &Constellation,
    x: usize,
    noise: Noise,
    rng: &mut R,
) -> [f64; 2] {
    match state {
        ChannelState::Demod(s) => {
            let y = demod_channel(constellation.point(x), s, noise, rng);
            [y.re, y.im]
        }
        ChannelState::Equalizer(s) => eq_channel(constellation.point(x).re, s, noise, rng),
    }
}

/// Generates `n_tr + n_te` i.i.d. channel uses for one channel state; the
/// first `n_tr` form the training set and the rest the test set.
pub fn generate_frame<R: Rng + ?Sized>(
    state: &ChannelState,
    n_tr: usize,
    n_te: usize,
    noise: Noise,
    source: SymbolSource,
    rng: &mut R,
) -> FrameDataset {
    let constellation = state.constellation();
    let mut samples = (0..n_tr + n_te).map(|i| {
        let x = match source {
            SymbolSource::Uniform => rng.gen_range(0..constellation.len()),
            SymbolSource::Cyclic => i % constellation.len(),
        };
        let y = transmit(state, &constellation, x, noise, rng);
        Sample { y, x }
    });
    let train = samples.by_ref().take(n_tr).collect();
    let test = samples.collect();
    FrameDataset {
        state: *state,
        snr: noise.snr(),
        train,
        test,
    }
}
