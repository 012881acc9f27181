//! Time-varying tapped-delay-line channel with Doppler-correlated Rayleigh
//! taps and additive white Gaussian noise.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baseband::ComplexSignal;
use crate::error::{Error, Result};
use crate::seed;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const DEFAULT_CARRIER_HZ: f64 = 3.5e9;
/// Rays in the sum-of-sinusoids fading generator.
pub const JAKES_RAYS: usize = 32;

/// Multipath delays and powers for one propagation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathProfile {
    pub scenario_id: String,
    #[serde(rename = "delays_s")]
    pub delays: Vec<f64>,
    pub powers: Vec<f64>,
}

impl PathProfile {
    /// Validates and normalises powers to sum to one.
    pub fn new(scenario_id: impl Into<String>, delays: Vec<f64>, powers: Vec<f64>) -> Result<Self> {
        let mut p = Self {
            scenario_id: scenario_id.into(),
            delays,
            powers,
        };
        p.validate()?;
        let total: f64 = p.powers.iter().sum();
        p.powers.iter_mut().for_each(|v| *v /= total);
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.delays.is_empty() || self.delays.len() != self.powers.len() {
            return Err(Error::config(format!(
                "path profile {:?}: {} delays vs {} powers",
                self.scenario_id,
                self.delays.len(),
                self.powers.len()
            )));
        }
        if self.powers.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::config("path powers must be positive and finite"));
        }
        if self.delays.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::config("path delays must be non-negative and finite"));
        }
        if self.delays.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("path delays must be nondecreasing"));
        }
        Ok(())
    }

    /// Load a profile from its JSON form, validating and normalising it.
    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: PathProfile = serde_json::from_str(&text)?;
        Self::new(raw.scenario_id, raw.delays, raw.powers)
    }
}

/// Procedural scenario: `n_paths` delays drawn uniformly in
/// `[0, delay_spread_s]` (the first path pinned at zero delay) with powers
/// falling off linearly in dB, `decay_db` at the full spread.
pub fn gen_scenario(seed: u64, n_paths: usize, delay_spread_s: f64, decay_db: f64) -> Result<PathProfile> {
    if n_paths == 0 {
        return Err(Error::config("scenario needs at least one path"));
    }
    if !(delay_spread_s >= 0.0) {
        return Err(Error::config("delay spread must be non-negative"));
    }
    let mut rng = seed::rng(seed::derive(seed, &[seed::stream::SCENARIO]));
    let mut delays: Vec<f64> = std::iter::once(0.0)
        .chain((1..n_paths).map(|_| rng.random::<f64>() * delay_spread_s))
        .collect();
    delays.sort_by(f64::total_cmp);
    let powers = delays
        .iter()
        .map(|&d| {
            let frac = if delay_spread_s > 0.0 { d / delay_spread_s } else { 0.0 };
            10f64.powf(-decay_db * frac / 10.0)
        })
        .collect();
    PathProfile::new(format!("proc-{seed:016x}"), delays, powers)
}

/// Round each delay to the nearest sample, merge coincident taps by summing
/// their powers and renormalise. Returns `(tap index, power)` sorted by index.
pub fn discretize_delays(profile: &PathProfile, sample_period_s: f64) -> Result<Vec<(usize, f64)>> {
    if !(sample_period_s > 0.0) {
        return Err(Error::config("sample period must be positive"));
    }
    let mut taps: Vec<(usize, f64)> = Vec::new();
    for (&d, &p) in profile.delays.iter().zip(&profile.powers) {
        let idx = (d / sample_period_s).round() as usize;
        match taps.iter_mut().find(|(i, _)| *i == idx) {
            Some(t) => t.1 += p,
            None => taps.push((idx, p)),
        }
    }
    taps.sort_by_key(|t| t.0);
    let total: f64 = taps.iter().map(|t| t.1).sum();
    taps.iter_mut().for_each(|t| t.1 /= total);
    Ok(taps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MobilityKind {
    Static = 0,
    Pedestrian = 1,
    Vehicular = 2,
}

impl MobilityKind {
    pub const ALL: [MobilityKind; 3] = [MobilityKind::Static, MobilityKind::Pedestrian, MobilityKind::Vehicular];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MobilityKind::Static => "STATIC",
            MobilityKind::Pedestrian => "PEDESTRIAN",
            MobilityKind::Vehicular => "VEHICULAR",
        }
    }

    /// Nominal terminal speed: 0, 3 and 30 km/h.
    pub fn default_speed_mps(self) -> f64 {
        match self {
            MobilityKind::Static => 0.0,
            MobilityKind::Pedestrian => 3.0 / 3.6,
            MobilityKind::Vehicular => 30.0 / 3.6,
        }
    }
}

impl std::str::FromStr for MobilityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown mobility {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilityClass {
    pub name: MobilityKind,
    pub speed_mps: f64,
    pub carrier_hz: f64,
}

impl MobilityClass {
    pub fn preset(name: MobilityKind) -> Self {
        Self {
            name,
            speed_mps: name.default_speed_mps(),
            carrier_hz: DEFAULT_CARRIER_HZ,
        }
    }

    pub fn with_carrier(mut self, carrier_hz: f64) -> Self {
        self.carrier_hz = carrier_hz;
        self
    }
}

pub fn doppler_from_speed(mobility: &MobilityClass) -> Result<f64> {
    if !(mobility.speed_mps >= 0.0) {
        return Err(Error::config("speed must be non-negative"));
    }
    Ok(mobility.speed_mps * mobility.carrier_hz / SPEED_OF_LIGHT)
}

/// Sum-of-sinusoids Rayleigh fading with the classical Jakes spectrum:
/// `JAKES_RAYS` equal-power rays with random arrival angles and phases.
/// Unit mean-square; ensemble autocorrelation `J0(2 pi f_D T_s lag)`.
/// With `f_D = 0` every ray is frozen and the sequence is constant.
pub fn jakes_fading(doppler_hz: f64, sample_period_s: f64, length: usize, seed: u64) -> Result<Vec<Complex64>> {
    let norm = doppler_hz * sample_period_s;
    if !(norm >= 0.0) {
        return Err(Error::config("doppler must be non-negative"));
    }
    if norm >= 0.5 {
        return Err(Error::Alias(norm));
    }
    let mut rng = seed::rng(seed);
    let rays: Vec<(f64, f64)> = (0..JAKES_RAYS)
        .map(|_| {
            let angle = rng.random::<f64>() * 2.0 * PI;
            let phase = rng.random::<f64>() * 2.0 * PI;
            (2.0 * PI * norm * angle.cos(), phase)
        })
        .collect();
    let amp = (JAKES_RAYS as f64).sqrt().recip();
    Ok((0..length)
        .map(|n| {
            rays.iter()
                .map(|&(w, phi)| Complex64::from_polar(amp, w * n as f64 + phi))
                .sum()
        })
        .collect())
}

/// Per-tap fading sequences for one channel draw.
#[derive(Debug, Clone)]
pub struct FadingState {
    pub doppler_hz: f64,
    pub sample_period_s: f64,
    pub per_tap: Vec<Vec<Complex64>>,
    pub seed: u64,
}

impl FadingState {
    pub fn generate(doppler_hz: f64, sample_period_s: f64, n_taps: usize, length: usize, seed: u64) -> Result<Self> {
        let per_tap = (0..n_taps)
            .map(|l| {
                jakes_fading(
                    doppler_hz,
                    sample_period_s,
                    length,
                    seed::derive(seed, &[seed::stream::FADING, l as u64]),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            doppler_hz,
            sample_period_s,
            per_tap,
            seed,
        })
    }
}

/// A fully specified channel draw: integer tap delays, their time-varying
/// gains, and the noise level.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub tap_indices: Vec<usize>,
    pub tap_gains: Vec<Vec<Complex64>>,
    pub noise_var: f64,
    pub snr_db: f64,
}

impl ChannelRealization {
    /// Static (time-invariant) taps; handy for tests and identity channels.
    pub fn fixed(taps: &[(usize, Complex64)], length: usize) -> Self {
        Self {
            tap_indices: taps.iter().map(|t| t.0).collect(),
            tap_gains: taps.iter().map(|t| vec![t.1; length]).collect(),
            noise_var: 0.0,
            snr_db: f64::INFINITY,
        }
    }

    /// Discretise `profile`, then draw Jakes fading for each merged tap.
    pub fn draw(
        profile: &PathProfile,
        doppler_hz: f64,
        sample_period_s: f64,
        length: usize,
        snr_db: f64,
        seed: u64,
    ) -> Result<Self> {
        let taps = discretize_delays(profile, sample_period_s)?;
        let fading = FadingState::generate(doppler_hz, sample_period_s, taps.len(), length, seed)?;
        let tap_gains = taps
            .iter()
            .zip(fading.per_tap)
            .map(|(&(_, p), alpha)| {
                let amp = p.sqrt();
                alpha.into_iter().map(|a| a * amp).collect()
            })
            .collect();
        Ok(Self {
            tap_indices: taps.iter().map(|t| t.0).collect(),
            tap_gains,
            noise_var: 0.0,
            snr_db,
        })
    }

    /// Fading taps followed by AWGN at `snr_db`; records the noise variance.
    pub fn propagate(&mut self, x: &ComplexSignal, noise_seed: u64) -> Result<ComplexSignal> {
        let y = apply_tdl(x, self)?;
        let (out, var) = add_awgn(&y, self.snr_db, noise_seed)?;
        self.noise_var = var;
        Ok(out)
    }
}

/// `y[n] = sum_l h_l[n] x[n - d_l]`, zero history, same length as `x`.
pub fn apply_tdl(x: &ComplexSignal, realization: &ChannelRealization) -> Result<ComplexSignal> {
    let n = x.len();
    if realization.tap_indices.len() != realization.tap_gains.len() {
        return Err(Error::shape("tap index and gain counts differ"));
    }
    if let Some(g) = realization.tap_gains.iter().find(|g| g.len() < n) {
        return Err(Error::shape(format!(
            "tap gains cover {} samples, signal has {n}",
            g.len()
        )));
    }
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    for (&d, gains) in realization.tap_indices.iter().zip(&realization.tap_gains) {
        for i in d..n {
            y[i] += gains[i] * x.samples[i - d];
        }
    }
    Ok(ComplexSignal::new(y, x.sample_rate_hz, x.origin_seed))
}

/// Circularly-symmetric complex Gaussian samples with variance `var`.
pub fn complex_noise(len: usize, var: f64, seed: u64) -> Vec<Complex64> {
    let mut rng = seed::rng(seed);
    let sd = (var / 2.0).sqrt();
    (0..len)
        .map(|_| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(re * sd, im * sd)
        })
        .collect()
}

/// Add noise so that `mean|y|^2 / sigma^2` equals `snr_db`. An infinite SNR
/// leaves `y` untouched. Returns the signal and the noise variance used.
pub fn add_awgn(y: &ComplexSignal, snr_db: f64, seed: u64) -> Result<(ComplexSignal, f64)> {
    if y.is_empty() {
        return Err(Error::shape("cannot add noise to an empty signal"));
    }
    if snr_db == f64::INFINITY {
        return Ok((y.clone(), 0.0));
    }
    let power = y.mean_power();
    if power == 0.0 {
        return Err(Error::ZeroSignal);
    }
    let var = power / 10f64.powf(snr_db / 10.0);
    let noise = complex_noise(y.len(), var, seed);
    let samples = y.samples.iter().zip(&noise).map(|(a, b)| a + b).collect();
    Ok((ComplexSignal::new(samples, y.sample_rate_hz, y.origin_seed), var))
}
