//! Received signal to spectrogram: STFT, power, log/z-score preprocessing,
//! plus the labelled dataset generator and its binary shard format.

mod dataset;
mod shard;

pub use dataset::{
    generate_dataset, load_dataset, synthesize_spectrogram, Cell, ChannelConfig, Dataset, DatasetConfig, Manifest,
    ManifestCount, ManifestShard, SampleSpec, StftSettings, MANIFEST_FILE,
};
pub use shard::{read_shard, write_shard, ShardHeader, LABEL_BLOCK_BYTES, SHARD_MAGIC, SHARD_VERSION};

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::baseband::{CodeScheme, ComplexSignal, Modulation, Protocol};
use crate::channel::MobilityKind;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-12;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
    Rect,
}

impl WindowKind {
    /// Periodic window of length `n`.
    pub fn build(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Rect => vec![1.0; n],
            WindowKind::Hann => (0..n)
                .map(|m| 0.5 - 0.5 * (2.0 * PI * m as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    pub window: Vec<f64>,
    pub hop: usize,
    pub kept_bins: usize,
}

impl StftConfig {
    pub fn new(window: Vec<f64>, hop: usize, kept_bins: usize) -> Result<Self> {
        let n_w = window.len();
        if hop == 0 || hop > n_w {
            return Err(Error::config(format!("hop {hop} must be in 1..={n_w}")));
        }
        if kept_bins == 0 || kept_bins > n_w {
            return Err(Error::config(format!("kept bins {kept_bins} must be in 1..={n_w}")));
        }
        if window.iter().all(|&w| w == 0.0) {
            return Err(Error::config("window is identically zero"));
        }
        Ok(Self {
            window,
            hop,
            kept_bins,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// Frames produced from `n_x` samples: `floor((n_x - N_w) / R) + 1`.
    pub fn frame_count(&self, n_x: usize) -> Option<usize> {
        (n_x >= self.window.len()).then(|| (n_x - self.window.len()) / self.hop + 1)
    }

    /// Samples needed for exactly `frames` frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop + self.window.len()
    }
}

/// Row-major complex matrix of STFT coefficients, `frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stft {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Stft {
    pub fn at(&self, t: usize, k: usize) -> Complex64 {
        self.data[t * self.bins + k]
    }
}

/// `Y[t,k] = sum_m y[tR+m] w[m] exp(-j 2 pi k m / N_w)`, no padding.
pub fn stft(y: &ComplexSignal, cfg: &StftConfig) -> Result<Stft> {
    let n_w = cfg.window_len();
    let frames = cfg.frame_count(y.len()).ok_or(Error::SignalTooShort {
        len: y.len(),
        window: n_w,
    })?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_w);
    let mut data = Vec::with_capacity(frames * n_w);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_w];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (m, b) in buf.iter_mut().enumerate() {
            *b = y.samples[start + m] * cfg.window[m];
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf);
    }
    Ok(Stft {
        frames,
        bins: n_w,
        data,
    })
}

/// Power matrix `|Y|^2` over the first `kept_bins` bins, row-major `T x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerMatrix {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

pub fn power(y: &Stft, kept_bins: usize) -> Result<PowerMatrix> {
    if kept_bins > y.bins {
        return Err(Error::shape(format!("kept bins {kept_bins} exceed {} STFT bins", y.bins)));
    }
    let data = (0..y.frames)
        .flat_map(|t| (0..kept_bins).map(move |k| (t, k)))
        .map(|(t, k)| y.at(t, k).norm_sqr())
        .collect();
    Ok(PowerMatrix {
        frames: y.frames,
        bins: kept_bins,
        data,
    })
}

/// Global log-domain normalisation statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub epsilon: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl NormStats {
    /// Statistics over values already in the `log10(P + eps)` domain.
    pub fn fit_log<'a>(samples: impl IntoIterator<Item = &'a [f32]>, epsilon: f64) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for s in samples {
            for &v in s {
                let v = v as f64;
                n += 1;
                sum += v;
                sum_sq += v * v;
            }
        }
        if n == 0 {
            return Err(Error::config("cannot fit normalisation stats on an empty sample"));
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        Ok(Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
            epsilon,
        })
    }

    pub fn apply(&self, log_power: f32) -> f32 {
        ((log_power as f64 - self.mean) / self.std) as f32
    }
}

pub fn log_power(p: &PowerMatrix, epsilon: f64) -> Vec<f32> {
    p.data.iter().map(|&v| (v + epsilon).log10() as f32).collect()
}

/// Mean and std of `log10(P + eps)` over every entry of every matrix; std
/// floored at `STD_FLOOR`.
pub fn fit_norm_stats(sample: &[PowerMatrix], epsilon: f64) -> Result<NormStats> {
    let logs: Vec<Vec<f32>> = sample.iter().map(|p| log_power(p, epsilon)).collect();
    NormStats::fit_log(logs.iter().map(Vec::as_slice), epsilon)
}

/// Everything known about how a spectrogram was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramLabel {
    pub protocol: Protocol,
    pub modulation: Modulation,
    pub code: CodeScheme,
    pub snr_db: f64,
    pub mobility: MobilityKind,
    pub doppler_hz: f64,
    pub scenario_id: String,
    pub seed: u64,
    pub cell: u32,
    pub realization: u32,
}

impl Default for SpectrogramLabel {
    fn default() -> Self {
        Self {
            protocol: Protocol::WifiLike,
            modulation: Modulation::Bpsk,
            code: CodeScheme::Identity,
            snr_db: 0.0,
            mobility: MobilityKind::Static,
            doppler_hz: 0.0,
            scenario_id: String::new(),
            seed: 0,
            cell: 0,
            realization: 0,
        }
    }
}

/// `T x K x C` real tensor (C = 1), row-major over `(t, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub label: SpectrogramLabel,
    pub normalized: bool,
}

impl Spectrogram {
    pub fn at(&self, t: usize, k: usize) -> f32 {
        self.data[t * self.bins + k]
    }

    /// Apply z-score normalisation to a log-power spectrogram.
    pub fn normalize(&self, stats: &NormStats) -> Spectrogram {
        assert!(!self.normalized, "spectrogram already normalised");
        Spectrogram {
            data: self.data.iter().map(|&v| stats.apply(v)).collect(),
            normalized: true,
            ..self.clone()
        }
    }
}

/// `S = (log10(P + eps) - mean) / std`, shaped `T x K x 1`.
pub fn preprocess(p: &PowerMatrix, stats: &NormStats, label: SpectrogramLabel) -> Result<Spectrogram> {
    if !(stats.std > 0.0) {
        return Err(Error::config("normalisation std must be positive"));
    }
    let data = log_power(p, stats.epsilon).into_iter().map(|v| stats.apply(v)).collect();
    Ok(Spectrogram {
        frames: p.frames,
        bins: p.bins,
        channels: 1,
        data,
        label,
        normalized: true,
    })
}

/// Mean absolute frame-to-frame change, `mean |S[t+1,k] - S[t,k]|`.
pub fn temporal_variation(s: &Spectrogram) -> f64 {
    if s.frames < 2 {
        return 0.0;
    }
    let k = s.bins;
    let total: f64 = s
        .data
        .windows(k + 1)
        .take((s.frames - 1) * k)
        .map(|w| (w[k] as f64 - w[0] as f64).abs())
        .sum();
    total / ((s.frames - 1) * k) as f64
}
