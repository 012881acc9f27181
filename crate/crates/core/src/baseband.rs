//! Transmit-side baseband synthesis: bits, channel coding, interleaving,
//! symbol mapping, pulse shaping and the protocol templates that tie them
//! together into a frame.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Wireless protocol family. The discriminant is also the expert index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Protocol {
    WifiLike = 0,
    LteLike = 1,
    NrLike = 2,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::WifiLike, Protocol::LteLike, Protocol::NrLike];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::WifiLike => "WIFI_LIKE",
            Protocol::LteLike => "LTE_LIKE",
            Protocol::NrLike => "NR_LIKE",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown protocol {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modulation {
    Bpsk = 0,
    Qpsk = 1,
    Qam16 = 2,
    Qam64 = 3,
    Qam256 = 4,
}

impl Modulation {
    pub const ALL: [Modulation; 5] = [
        Modulation::Bpsk,
        Modulation::Qpsk,
        Modulation::Qam16,
        Modulation::Qam64,
        Modulation::Qam256,
    ];

    pub fn order(self) -> usize {
        1 << self.bits_per_symbol()
    }

    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qpsk => 2,
            Modulation::Qam16 => 4,
            Modulation::Qam64 => 6,
            Modulation::Qam256 => 8,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "BPSK",
            Modulation::Qpsk => "QPSK",
            Modulation::Qam16 => "QAM16",
            Modulation::Qam64 => "QAM64",
            Modulation::Qam256 => "QAM256",
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace(['-', '_'], "").to_ascii_uppercase();
        Self::ALL
            .into_iter()
            .find(|m| m.name() == norm || (norm.ends_with("QAM") && format!("QAM{}", &norm[..norm.len() - 3]) == m.name()))
            .ok_or_else(|| Error::config(format!("unknown modulation {s:?}")))
    }
}

/// Channel code family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CodeScheme {
    #[default]
    Identity = 0,
    Repeat2 = 1,
}

impl CodeScheme {
    /// Code rate as (numerator, denominator).
    pub fn rate(self) -> (usize, usize) {
        match self {
            CodeScheme::Identity => (1, 1),
            CodeScheme::Repeat2 => (1, 2),
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(CodeScheme::Identity),
            1 => Some(CodeScheme::Repeat2),
            _ => None,
        }
    }
}

/// Information bits and their coded image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitFrame {
    pub bits: Vec<u8>,
    pub coded: Vec<u8>,
    pub scheme: CodeScheme,
}

impl BitFrame {
    pub fn new(bits: Vec<u8>, scheme: CodeScheme) -> Result<Self> {
        let coded = encode_bits(&bits, scheme)?;
        Ok(Self { bits, coded, scheme })
    }

    pub fn random(n_bits: usize, scheme: CodeScheme, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let bits = (0..n_bits).map(|_| rng.random_range(0..2u8)).collect();
        Self::new(bits, scheme)
    }
}

fn check_binary(bits: &[u8]) -> Result<()> {
    match bits.iter().position(|&b| b > 1) {
        Some(index) => Err(Error::InvalidBits {
            index,
            value: bits[index],
        }),
        None => Ok(()),
    }
}

pub fn encode_bits(bits: &[u8], scheme: CodeScheme) -> Result<Vec<u8>> {
    check_binary(bits)?;
    Ok(match scheme {
        CodeScheme::Identity => bits.to_vec(),
        CodeScheme::Repeat2 => bits.iter().flat_map(|&b| [b, b]).collect(),
    })
}

/// Block interleaver: write row-major into a `rows x (len/rows)` array,
/// read column-major.
pub fn interleave<T: Copy>(coded: &[T], rows: usize) -> Result<Vec<T>> {
    let cols = block_cols(coded.len(), rows)?;
    let mut out = Vec::with_capacity(coded.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(coded[r * cols + c]);
        }
    }
    Ok(out)
}

pub fn deinterleave<T: Copy>(data: &[T], rows: usize) -> Result<Vec<T>> {
    let cols = block_cols(data.len(), rows)?;
    let mut out = data.to_vec();
    for c in 0..cols {
        for r in 0..rows {
            out[r * cols + c] = data[c * rows + r];
        }
    }
    Ok(out)
}

fn block_cols(len: usize, rows: usize) -> Result<usize> {
    if rows == 0 || len % rows != 0 {
        return Err(Error::shape(format!(
            "interleaver: length {len} not divisible by {rows} rows"
        )));
    }
    Ok(len / rows)
}

/// Unit-energy constellation with Gray labelling. `points[label]` is the
/// symbol for the m-bit label read MSB first.
#[derive(Debug, Clone)]
pub struct Constellation {
    pub modulation: Modulation,
    pub points: Vec<Complex64>,
}

fn gray_to_binary(mut g: usize) -> usize {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

/// Per-axis Gray amplitude: label bits `g` on an axis with `levels` points.
/// The all-zero label sits at the positive end so BPSK maps 0 -> +1.
fn axis_level(g: usize, levels: usize) -> f64 {
    (levels as f64 - 1.0) - 2.0 * gray_to_binary(g) as f64
}

impl Constellation {
    pub fn new(modulation: Modulation) -> Self {
        let m = modulation.bits_per_symbol();
        let order = modulation.order();
        let raw: Vec<Complex64> = if modulation == Modulation::Bpsk {
            vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)]
        } else {
            let half = m / 2;
            let levels = 1 << half;
            let mask = levels - 1;
            (0..order)
                .map(|label| {
                    let i_bits = label >> half;
                    let q_bits = label & mask;
                    Complex64::new(axis_level(i_bits, levels), axis_level(q_bits, levels))
                })
                .collect()
        };
        let energy = raw.iter().map(|p| p.norm_sqr()).sum::<f64>() / order as f64;
        let scale = energy.sqrt().recip();
        Self {
            modulation,
            points: raw.into_iter().map(|p| p * scale).collect(),
        }
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.modulation.bits_per_symbol()
    }

    pub fn mean_energy(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.points.len() as f64
    }

    /// Label of the closest constellation point (first on ties).
    pub fn nearest_label(&self, z: Complex64) -> usize {
        let mut best = (0, f64::INFINITY);
        for (label, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best.1 {
                best = (label, d);
            }
        }
        best.0
    }

    /// Hard-decision demapper, the inverse of [`map_symbols`] at infinite SNR.
    pub fn demap(&self, symbols: &[Complex64]) -> Vec<u8> {
        let m = self.bits_per_symbol();
        symbols
            .iter()
            .flat_map(|&s| {
                let label = self.nearest_label(s);
                (0..m).rev().map(move |b| ((label >> b) & 1) as u8)
            })
            .collect()
    }
}

pub fn map_symbols(coded: &[u8], constellation: &Constellation) -> Result<Vec<Complex64>> {
    check_binary(coded)?;
    let m = constellation.bits_per_symbol();
    if coded.len() % m != 0 {
        return Err(Error::shape(format!(
            "{} coded bits not divisible by {m} bits/symbol",
            coded.len()
        )));
    }
    Ok(coded
        .chunks_exact(m)
        .map(|chunk| {
            let label = chunk.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
            constellation.points[label]
        })
        .collect())
}

/// Root-raised-cosine impulse response sampled at `n_os` samples per symbol
/// over `span_symbols` symbols, normalised to unit energy. Length is
/// `span_symbols * n_os + 1`.
pub fn rrc_taps(rolloff: f64, span_symbols: usize, n_os: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&rolloff) {
        return Err(Error::config(format!("rolloff {rolloff} outside [0, 1]")));
    }
    if span_symbols < 4 || n_os < 2 {
        return Err(Error::config(format!(
            "rrc needs span >= 4 and oversampling >= 2, got {span_symbols} and {n_os}"
        )));
    }
    let half = (span_symbols * n_os / 2) as isize;
    let beta = rolloff;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|n| {
            let t = n as f64 / n_os as f64;
            rrc_value(t, beta)
        })
        .collect();
    let energy = taps.iter().map(|g| g * g).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|g| *g /= energy);
    Ok(taps)
}

fn rrc_value(t: f64, beta: f64) -> f64 {
    const EPS: f64 = 1e-9;
    if t.abs() < EPS {
        return 1.0 - beta + 4.0 * beta / PI;
    }
    if beta > 0.0 && (t.abs() - 1.0 / (4.0 * beta)).abs() < EPS {
        let a = PI / (4.0 * beta);
        return beta / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    let num = (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
    let den = PI * t * (1.0 - (4.0 * beta * t).powi(2));
    num / den
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseShaper {
    pub taps: Vec<f64>,
    pub oversampling: usize,
    pub rolloff: f64,
}

impl PulseShaper {
    pub fn rrc(rolloff: f64, span_symbols: usize, oversampling: usize) -> Result<Self> {
        Ok(Self {
            taps: rrc_taps(rolloff, span_symbols, oversampling)?,
            oversampling,
            rolloff,
        })
    }
}

/// Discrete-time complex baseband samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSignal {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
    pub origin_seed: u64,
}

impl ComplexSignal {
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64, origin_seed: u64) -> Self {
        Self {
            samples,
            sample_rate_hz,
            origin_seed,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.re.is_finite() && s.im.is_finite())
    }
}

/// Linear modulation by superposition of shifted pulses. Output length is
/// `(N_s - 1) * N_os + N_g`.
pub fn pulse_shape(symbols: &[Complex64], shaper: &PulseShaper) -> Result<Vec<Complex64>> {
    if symbols.is_empty() {
        return Err(Error::shape("pulse_shape needs at least one symbol"));
    }
    let n_os = shaper.oversampling;
    let n_g = shaper.taps.len();
    let mut x = vec![Complex64::new(0.0, 0.0); (symbols.len() - 1) * n_os + n_g];
    for (i, &s) in symbols.iter().enumerate() {
        let base = i * n_os;
        for (j, &g) in shaper.taps.iter().enumerate() {
            x[base + j] += s * g;
        }
    }
    Ok(x)
}

/// OFDM: unitary inverse DFT per block of `fft_size` subcarrier values,
/// each block preceded by a `cp_len`-sample cyclic prefix.
pub fn ofdm_modulate(symbols: &[Complex64], fft_size: usize, cp_len: usize) -> Result<Vec<Complex64>> {
    if fft_size == 0 || symbols.len() % fft_size != 0 {
        return Err(Error::shape(format!(
            "{} subcarrier values not divisible by fft size {fft_size}",
            symbols.len()
        )));
    }
    if cp_len > fft_size {
        return Err(Error::shape(format!("cyclic prefix {cp_len} longer than fft size {fft_size}")));
    }
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(fft_size);
    let scale = (fft_size as f64).sqrt().recip();
    let mut out = Vec::with_capacity(symbols.len() / fft_size * (fft_size + cp_len));
    let mut block = vec![Complex64::new(0.0, 0.0); fft_size];
    for chunk in symbols.chunks_exact(fft_size) {
        block.copy_from_slice(chunk);
        ifft.process(&mut block);
        block.iter_mut().for_each(|v| *v *= scale);
        out.extend_from_slice(&block[fft_size - cp_len..]);
        out.extend_from_slice(&block);
    }
    Ok(out)
}

/// Place `active` data symbols per block on the subcarriers nearest DC
/// (DC itself left empty), guard bands zero.
pub fn map_subcarriers(data: &[Complex64], fft_size: usize, active: usize) -> Result<Vec<Complex64>> {
    if active == 0 || active >= fft_size || active % 2 != 0 {
        return Err(Error::config(format!(
            "active subcarriers {active} must be even and below fft size {fft_size}"
        )));
    }
    if data.len() % active != 0 {
        return Err(Error::shape(format!(
            "{} data symbols not divisible by {active} active subcarriers",
            data.len()
        )));
    }
    let half = active / 2;
    let mut grid = Vec::with_capacity(data.len() / active * fft_size);
    for block in data.chunks_exact(active) {
        let mut bins = vec![Complex64::new(0.0, 0.0); fft_size];
        // positive frequencies 1..=half, negative fft_size-half..fft_size
        bins[1..=half].copy_from_slice(&block[..half]);
        bins[fft_size - half..].copy_from_slice(&block[half..]);
        grid.extend(bins);
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CarrierMode {
    SingleCarrier,
    Ofdm,
}

/// Parameterised stand-in for a wireless standard's PHY.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTemplate {
    pub id: Protocol,
    pub carrier_mode: CarrierMode,
    /// Samples per symbol (single carrier only).
    pub oversampling: usize,
    pub rolloff: f64,
    pub span_symbols: usize,
    pub fft_size: usize,
    pub cp_len: usize,
    /// Occupied subcarriers per OFDM block (DC and guard bands are empty).
    pub active_subcarriers: usize,
    /// Total symbols per frame, preamble included.
    pub frame_len_symbols: usize,
    pub preamble_len: usize,
    pub interleaver_rows: usize,
    pub sample_rate_hz: f64,
}

/// Desk-scale sample rate: a 64-frame spectrogram then spans ~170 ms, long
/// enough for 30 km/h Doppler at 3.5 GHz to decorrelate the taps.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 12_000.0;

impl ProtocolTemplate {
    pub fn preset(id: Protocol) -> Self {
        match id {
            Protocol::WifiLike => Self {
                id,
                carrier_mode: CarrierMode::SingleCarrier,
                oversampling: 4,
                rolloff: 0.25,
                span_symbols: 12,
                fft_size: 0,
                cp_len: 0,
                active_subcarriers: 0,
                frame_len_symbols: 528,
                preamble_len: 16,
                interleaver_rows: 4,
                sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            },
            Protocol::LteLike => Self {
                id,
                carrier_mode: CarrierMode::Ofdm,
                oversampling: 1,
                rolloff: 0.0,
                span_symbols: 0,
                fft_size: 64,
                cp_len: 16,
                active_subcarriers: 36,
                frame_len_symbols: 36 * 27,
                preamble_len: 36,
                interleaver_rows: 4,
                sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            },
            Protocol::NrLike => Self {
                id,
                carrier_mode: CarrierMode::Ofdm,
                oversampling: 1,
                rolloff: 0.0,
                span_symbols: 0,
                fft_size: 128,
                cp_len: 9,
                active_subcarriers: 108,
                frame_len_symbols: 108 * 16,
                preamble_len: 108,
                interleaver_rows: 4,
                sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.preamble_len >= self.frame_len_symbols {
            return Err(Error::config("preamble longer than frame"));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::config("sample rate must be positive"));
        }
        match self.carrier_mode {
            CarrierMode::SingleCarrier => {
                if self.oversampling < 2 || self.span_symbols < 4 || !(0.0..=1.0).contains(&self.rolloff) {
                    return Err(Error::config("invalid single-carrier pulse parameters"));
                }
            }
            CarrierMode::Ofdm => {
                let a = self.active_subcarriers;
                if a == 0 || a >= self.fft_size || a % 2 != 0 || self.cp_len > self.fft_size {
                    return Err(Error::config("invalid OFDM numerology"));
                }
                if self.frame_len_symbols % a != 0 || self.preamble_len % a != 0 {
                    return Err(Error::config(
                        "OFDM frame and preamble must be whole blocks of active subcarriers",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn data_symbols(&self) -> usize {
        self.frame_len_symbols - self.preamble_len
    }

    /// Number of output samples for the current frame length.
    pub fn frame_samples(&self) -> usize {
        match self.carrier_mode {
            CarrierMode::SingleCarrier => {
                (self.frame_len_symbols - 1) * self.oversampling + self.span_symbols * self.oversampling + 1
            }
            CarrierMode::Ofdm => {
                self.frame_len_symbols / self.active_subcarriers * (self.fft_size + self.cp_len)
            }
        }
    }

    /// Grow the frame (keeping block and interleaver alignment) until it
    /// yields at least `min_samples` samples.
    pub fn with_min_samples(&self, min_samples: usize) -> Self {
        let mut t = self.clone();
        let step = match t.carrier_mode {
            CarrierMode::SingleCarrier => t.interleaver_rows.max(2),
            CarrierMode::Ofdm => t.active_subcarriers,
        };
        while t.frame_samples() < min_samples {
            t.frame_len_symbols += step;
        }
        t
    }

    /// The fixed known symbol prefix for this protocol.
    pub fn preamble(&self) -> Vec<Complex64> {
        let mut rng = seed::rng(seed::derive(0x5052_4541_4D42_4C45, &[seed::stream::PREAMBLE, self.id as u64]));
        (0..self.preamble_len)
            .map(|_| Complex64::new(if rng.random::<bool>() { 1.0 } else { -1.0 }, 0.0))
            .collect()
    }
}

/// Modulation and coding choice for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mcs {
    pub modulation: Modulation,
    pub code: CodeScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub protocol: Protocol,
    pub modulation: Modulation,
    pub code: CodeScheme,
    pub n_info_bits: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub signal: ComplexSignal,
    pub label: FrameLabel,
}

/// Full transmit chain for one frame: random bits, coding, interleaving,
/// mapping, preamble insertion and pulse shaping or OFDM. The output is
/// scaled to unit mean power.
pub fn synthesize_frame(template: &ProtocolTemplate, mcs: Mcs, seed: u64) -> Result<Frame> {
    template.validate()?;
    let m = mcs.modulation.bits_per_symbol();
    let n_coded = template.data_symbols() * m;
    let (num, den) = mcs.code.rate();
    if n_coded % den != 0 || n_coded % template.interleaver_rows != 0 {
        return Err(Error::config(format!(
            "{n_coded} coded bits incompatible with code rate {num}/{den} and {} interleaver rows",
            template.interleaver_rows
        )));
    }
    let n_info = n_coded * num / den;
    let frame = BitFrame::random(n_info, mcs.code, seed::derive(seed, &[seed::stream::BITS]))?;
    let interleaved = interleave(&frame.coded, template.interleaver_rows)?;
    let constellation = Constellation::new(mcs.modulation);
    let mut symbols = template.preamble();
    symbols.extend(map_symbols(&interleaved, &constellation)?);

    let (mut samples, gain) = match template.carrier_mode {
        CarrierMode::SingleCarrier => {
            let shaper = PulseShaper::rrc(template.rolloff, template.span_symbols, template.oversampling)?;
            (pulse_shape(&symbols, &shaper)?, (template.oversampling as f64).sqrt())
        }
        CarrierMode::Ofdm => {
            let grid = map_subcarriers(&symbols, template.fft_size, template.active_subcarriers)?;
            (
                ofdm_modulate(&grid, template.fft_size, template.cp_len)?,
                (template.fft_size as f64 / template.active_subcarriers as f64).sqrt(),
            )
        }
    };
    samples.iter_mut().for_each(|s| *s *= gain);
    Ok(Frame {
        signal: ComplexSignal::new(samples, template.sample_rate_hz, seed),
        label: FrameLabel {
            protocol: template.id,
            modulation: mcs.modulation,
            code: mcs.code,
            n_info_bits: n_info,
            seed,
        },
    })
}
