use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::shard::{read_shard, write_shard};
use super::{log_power, power, stft, NormStats, Spectrogram, SpectrogramLabel, StftConfig, WindowKind};
use crate::baseband::{synthesize_frame, CodeScheme, ComplexSignal, Mcs, Modulation, Protocol, ProtocolTemplate};
use crate::channel::{
    doppler_from_speed, gen_scenario, ChannelRealization, MobilityClass, MobilityKind, PathProfile,
    DEFAULT_CARRIER_HZ,
};
use crate::config::content_hash;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftSettings {
    pub n_fft: usize,
    pub hop: usize,
    pub frames: usize,
    pub kept_bins: usize,
    pub window: WindowKind,
    pub epsilon: f64,
}

impl Default for StftSettings {
    fn default() -> Self {
        Self {
            n_fft: 64,
            hop: 32,
            frames: 64,
            kept_bins: 64,
            window: WindowKind::Hann,
            epsilon: super::DEFAULT_EPSILON,
        }
    }
}

impl StftSettings {
    pub fn build(&self) -> Result<StftConfig> {
        StftConfig::new(self.window.build(self.n_fft), self.hop, self.kept_bins)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub n_paths: usize,
    pub delay_spread_s: f64,
    pub decay_db: f64,
    pub carrier_hz: f64,
    /// Distinct procedural scenarios cycled through by realization index.
    pub n_scenarios: usize,
    /// Path-profile JSON files used instead of procedural scenarios.
    pub profile_files: Vec<PathBuf>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            n_paths: 6,
            delay_spread_s: 2.5e-4,
            decay_db: 12.0,
            carrier_hz: DEFAULT_CARRIER_HZ,
            n_scenarios: 20,
            profile_files: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub protocols: Vec<Protocol>,
    pub modulations: Vec<Modulation>,
    pub code: CodeScheme,
    pub snr_db: Vec<f64>,
    pub mobilities: Vec<MobilityKind>,
    pub n_realizations: usize,
    pub master_seed: u64,
    pub stft: StftSettings,
    pub channel: ChannelConfig,
    pub templates: Vec<ProtocolTemplate>,
    pub shard_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            protocols: Protocol::ALL.to_vec(),
            modulations: Modulation::ALL.to_vec(),
            code: CodeScheme::Repeat2,
            snr_db: vec![0.0, 20.0],
            mobilities: vec![MobilityKind::Static, MobilityKind::Vehicular],
            n_realizations: 10,
            master_seed: 0,
            stft: StftSettings::default(),
            channel: ChannelConfig::default(),
            templates: Protocol::ALL.into_iter().map(ProtocolTemplate::preset).collect(),
            shard_size: 1024,
        }
    }
}

/// One grid cell of the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub protocol: Protocol,
    pub modulation: Modulation,
    pub snr_db: f64,
    pub mobility: MobilityKind,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.protocols.is_empty() || self.modulations.is_empty() || self.snr_db.is_empty() || self.mobilities.is_empty() {
            return Err(Error::config("dataset grid has an empty axis"));
        }
        if self.n_realizations == 0 || self.shard_size == 0 {
            return Err(Error::config("n_realizations and shard_size must be positive"));
        }
        if self.stft.frames == 0 {
            return Err(Error::config("spectrogram needs at least one frame"));
        }
        self.stft.build()?;
        for p in &self.protocols {
            self.template(*p)?.validate()?;
        }
        if self.channel.profile_files.is_empty() && (self.channel.n_scenarios == 0 || self.channel.n_paths == 0) {
            return Err(Error::config("need at least one scenario with one path"));
        }
        Ok(())
    }

    pub fn template(&self, protocol: Protocol) -> Result<&ProtocolTemplate> {
        self.templates
            .iter()
            .find(|t| t.id == protocol)
            .ok_or_else(|| Error::config(format!("no template for {protocol}")))
    }

    /// Grid cells in their canonical nested order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &protocol in &self.protocols {
            for &modulation in &self.modulations {
                for &snr_db in &self.snr_db {
                    for &mobility in &self.mobilities {
                        cells.push(Cell {
                            protocol,
                            modulation,
                            snr_db,
                            mobility,
                        });
                    }
                }
            }
        }
        cells
    }

    pub fn record_count(&self) -> usize {
        self.cells().len() * self.n_realizations
    }

    pub fn sample_seed(&self, cell: usize, realization: usize) -> u64 {
        seed::derive(self.master_seed, &[cell as u64, realization as u64])
    }

    pub fn scenarios(&self) -> Result<Vec<PathProfile>> {
        if !self.channel.profile_files.is_empty() {
            return self.channel.profile_files.iter().map(PathProfile::load_json).collect();
        }
        (0..self.channel.n_scenarios)
            .map(|i| {
                gen_scenario(
                    seed::derive(self.master_seed, &[seed::stream::SCENARIO, i as u64]),
                    self.channel.n_paths,
                    self.channel.delay_spread_s,
                    self.channel.decay_db,
                )
            })
            .collect()
    }
}

/// Everything that determines one spectrogram apart from its seed.
#[derive(Debug, Clone)]
pub struct SampleSpec<'a> {
    pub template: &'a ProtocolTemplate,
    pub mcs: Mcs,
    pub snr_db: f64,
    pub mobility: MobilityClass,
    pub profile: &'a PathProfile,
}

/// Transmit, propagate and transform one frame. Returns the log-power
/// spectrogram (not yet normalised).
pub fn synthesize_spectrogram(spec: &SampleSpec<'_>, settings: &StftSettings, sample_seed: u64) -> Result<Spectrogram> {
    let cfg = settings.build()?;
    let needed = cfg.samples_for(settings.frames);
    let template = spec.template.with_min_samples(needed);
    let frame = synthesize_frame(&template, spec.mcs, sample_seed)?;
    let mut x = frame.signal;
    x.samples.truncate(needed);
    let doppler = doppler_from_speed(&spec.mobility)?;
    let mut channel = ChannelRealization::draw(
        spec.profile,
        doppler,
        1.0 / template.sample_rate_hz,
        x.len(),
        spec.snr_db,
        seed::derive(sample_seed, &[seed::stream::FADING]),
    )?;
    let y: ComplexSignal = channel.propagate(&x, seed::derive(sample_seed, &[seed::stream::NOISE]))?;
    let p = power(&stft(&y, &cfg)?, settings.kept_bins)?;
    let data = log_power(&p, settings.epsilon);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spectrogram"));
    }
    Ok(Spectrogram {
        frames: p.frames,
        bins: p.bins,
        channels: 1,
        data,
        label: SpectrogramLabel {
            protocol: template.id,
            modulation: spec.mcs.modulation,
            code: spec.mcs.code,
            snr_db: spec.snr_db,
            mobility: spec.mobility.name,
            doppler_hz: doppler,
            scenario_id: spec.profile.scenario_id.clone(),
            seed: sample_seed,
            cell: 0,
            realization: 0,
        },
        normalized: false,
    })
}

/// A loaded dataset: log-power records plus the statistics to normalise them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<Spectrogram>,
    pub stats: NormStats,
}

impl Dataset {
    /// Synthesise every record of the grid in memory.
    pub fn synthesize(cfg: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let scenarios = cfg.scenarios()?;
        let mut records = Vec::with_capacity(cfg.record_count());
        for (ci, cell) in cfg.cells().into_iter().enumerate() {
            let template = cfg.template(cell.protocol)?;
            let mobility = MobilityClass::preset(cell.mobility).with_carrier(cfg.channel.carrier_hz);
            for r in 0..cfg.n_realizations {
                let spec = SampleSpec {
                    template,
                    mcs: Mcs {
                        modulation: cell.modulation,
                        code: cfg.code,
                    },
                    snr_db: cell.snr_db,
                    mobility,
                    profile: &scenarios[r % scenarios.len()],
                };
                let mut s = synthesize_spectrogram(&spec, &cfg.stft, cfg.sample_seed(ci, r))?;
                s.label.cell = ci as u32;
                s.label.realization = r as u32;
                records.push(s);
            }
        }
        let stats = NormStats::fit_log(records.iter().map(|r| r.data.as_slice()), cfg.stft.epsilon)?;
        Ok(Self { records, stats })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records normalised with `stats` (typically the pretraining set's).
    pub fn normalized(&self, stats: &NormStats) -> Vec<Spectrogram> {
        self.records.iter().map(|r| r.normalize(stats)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCount {
    pub protocol: Protocol,
    pub modulation: Modulation,
    pub snr_db: f64,
    pub mobility: MobilityKind,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestShard {
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub values: String,
    pub count: usize,
    pub frames: usize,
    pub bins: usize,
    pub channels: usize,
    pub master_seed: u64,
    pub config_hash: String,
    pub norm_stats: NormStats,
    pub shards: Vec<ManifestShard>,
    pub counts: Vec<ManifestCount>,
    pub config: DatasetConfig,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Synthesise the grid and write `shard-NNNN.sgs` files plus `manifest.json`
/// into `out_dir`.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ds = Dataset::synthesize(cfg)?;
    let mut shards = Vec::new();
    for (i, chunk) in ds.records.chunks(cfg.shard_size).enumerate() {
        let file = format!("shard-{i:04}.sgs");
        write_shard(out_dir.join(&file), chunk)?;
        shards.push(ManifestShard {
            file,
            count: chunk.len(),
        });
    }
    let mut counts: BTreeMap<(Protocol, Modulation, u64, MobilityKind), usize> = BTreeMap::new();
    for r in &ds.records {
        let l = &r.label;
        *counts.entry((l.protocol, l.modulation, l.snr_db.to_bits(), l.mobility)).or_default() += 1;
    }
    let first = ds.records.first();
    let manifest = Manifest {
        format: "SGS1".into(),
        version: super::SHARD_VERSION,
        values: "log10_power".into(),
        count: ds.len(),
        frames: first.map_or(0, |s| s.frames),
        bins: first.map_or(0, |s| s.bins),
        channels: 1,
        master_seed: cfg.master_seed,
        config_hash: content_hash(cfg)?,
        norm_stats: ds.stats,
        shards,
        counts: counts
            .into_iter()
            .map(|((protocol, modulation, snr, mobility), count)| ManifestCount {
                protocol,
                modulation,
                snr_db: f64::from_bits(snr),
                mobility,
                count,
            })
            .collect(),
        config: cfg.clone(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Read a dataset directory written by [`generate_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Dataset)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut records = Vec::with_capacity(manifest.count);
    for shard in &manifest.shards {
        let (header, recs) = read_shard(dir.join(&shard.file))?;
        if header.count as usize != shard.count {
            return Err(Error::config(format!(
                "{}: manifest says {} records, header {}",
                shard.file, shard.count, header.count
            )));
        }
        records.extend(recs);
    }
    if records.len() != manifest.count {
        return Err(Error::config("manifest count does not match shards"));
    }
    let stats = manifest.norm_stats;
    Ok((manifest, Dataset { records, stats }))
}
