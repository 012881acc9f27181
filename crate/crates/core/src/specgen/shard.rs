//! "SGS1" shard files: a fixed header followed by `count` records, each a
//! float32 little-endian `T x K x C` tensor and a 64-byte label block.
//!
//! ```text
//! header (24 bytes): magic "SGS1" | version u32 | count u32 | T u32 | K u32 | C u32
//! label  (64 bytes): protocol u8 | modulation u8 | code u8 | mobility u8
//!                    | snr_db f32 | doppler_hz f32 | realization u32
//!                    | seed u64 | cell u32 | reserved u32 | scenario_id [u8; 32]
//! ```
//! All integers and floats little-endian.

use std::io::Write;
use std::path::Path;

use super::{Spectrogram, SpectrogramLabel};
use crate::baseband::{CodeScheme, Modulation, Protocol};
use crate::channel::MobilityKind;
use crate::error::{Error, Result};

pub const SHARD_MAGIC: [u8; 4] = *b"SGS1";
pub const SHARD_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 24;
pub const LABEL_BLOCK_BYTES: usize = 64;
const SCENARIO_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u32,
    pub count: u32,
    pub frames: u32,
    pub bins: u32,
    pub channels: u32,
}

impl ShardHeader {
    fn record_bytes(&self) -> u64 {
        self.frames as u64 * self.bins as u64 * self.channels as u64 * 4 + LABEL_BLOCK_BYTES as u64
    }

    pub fn total_bytes(&self) -> u64 {
        HEADER_BYTES as u64 + self.count as u64 * self.record_bytes()
    }
}

fn encode_label(label: &SpectrogramLabel, out: &mut Vec<u8>) -> Result<()> {
    let start = out.len();
    out.extend([
        label.protocol as u8,
        label.modulation as u8,
        label.code as u8,
        label.mobility as u8,
    ]);
    out.extend((label.snr_db as f32).to_le_bytes());
    out.extend((label.doppler_hz as f32).to_le_bytes());
    out.extend(label.realization.to_le_bytes());
    out.extend(label.seed.to_le_bytes());
    out.extend(label.cell.to_le_bytes());
    out.extend(0u32.to_le_bytes());
    let id = label.scenario_id.as_bytes();
    if id.len() > SCENARIO_BYTES {
        return Err(Error::config(format!(
            "scenario id {:?} longer than {SCENARIO_BYTES} bytes",
            label.scenario_id
        )));
    }
    out.extend(id);
    out.extend(std::iter::repeat_n(0u8, SCENARIO_BYTES - id.len()));
    debug_assert_eq!(out.len() - start, LABEL_BLOCK_BYTES);
    Ok(())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn decode_label(b: &[u8]) -> Result<SpectrogramLabel> {
    let bad = |what: &str, v: u8| Error::config(format!("label block: invalid {what} code {v}"));
    let id_bytes = &b[32..32 + SCENARIO_BYTES];
    let id_len = id_bytes.iter().position(|&c| c == 0).unwrap_or(SCENARIO_BYTES);
    Ok(SpectrogramLabel {
        protocol: Protocol::from_index(b[0] as usize).ok_or_else(|| bad("protocol", b[0]))?,
        modulation: Modulation::from_index(b[1] as usize).ok_or_else(|| bad("modulation", b[1]))?,
        code: CodeScheme::from_index(b[2] as usize).ok_or_else(|| bad("code", b[2]))?,
        mobility: MobilityKind::from_index(b[3] as usize).ok_or_else(|| bad("mobility", b[3]))?,
        snr_db: f32_at(b, 4) as f64,
        doppler_hz: f32_at(b, 8) as f64,
        realization: u32_at(b, 12),
        seed: u64::from_le_bytes(b[16..24].try_into().unwrap()),
        cell: u32_at(b, 24),
        scenario_id: String::from_utf8(id_bytes[..id_len].to_vec())
            .map_err(|_| Error::config("label block: scenario id is not UTF-8"))?,
    })
}

/// Serialise `records` (all of identical geometry) to `path`.
pub fn write_shard(path: impl AsRef<Path>, records: &[Spectrogram]) -> Result<ShardHeader> {
    let path = path.as_ref();
    let (frames, bins, channels) = records
        .first()
        .map(|s| (s.frames, s.bins, s.channels))
        .unwrap_or((0, 0, 1));
    let header = ShardHeader {
        version: SHARD_VERSION,
        count: records.len() as u32,
        frames: frames as u32,
        bins: bins as u32,
        channels: channels as u32,
    };
    let mut buf = Vec::with_capacity(header.total_bytes() as usize);
    buf.extend(SHARD_MAGIC);
    for v in [header.version, header.count, header.frames, header.bins, header.channels] {
        buf.extend(v.to_le_bytes());
    }
    for s in records {
        if (s.frames, s.bins, s.channels) != (frames, bins, channels) || s.data.len() != frames * bins * channels {
            return Err(Error::shape("shard records must share one geometry"));
        }
        for v in &s.data {
            buf.extend(v.to_le_bytes());
        }
        encode_label(&s.label, &mut buf)?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(header)
}

/// Parse a shard. Records come back un-normalised (log-power domain).
pub fn read_shard(path: impl AsRef<Path>) -> Result<(ShardHeader, Vec<Spectrogram>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_shard(&bytes)
}

pub(crate) fn decode_shard(bytes: &[u8]) -> Result<(ShardHeader, Vec<Spectrogram>)> {
    if bytes.len() < HEADER_BYTES {
        if bytes.len() >= 4 && bytes[..4] != SHARD_MAGIC {
            return Err(Error::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(Error::TruncatedShard {
            expected: HEADER_BYTES as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != SHARD_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let header = ShardHeader {
        version: u32_at(bytes, 4),
        count: u32_at(bytes, 8),
        frames: u32_at(bytes, 12),
        bins: u32_at(bytes, 16),
        channels: u32_at(bytes, 20),
    };
    if header.version != SHARD_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: SHARD_VERSION,
        });
    }
    let expected = header.total_bytes();
    if (bytes.len() as u64) < expected {
        return Err(Error::TruncatedShard {
            expected,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() as u64 > expected {
        return Err(Error::shape(format!(
            "shard has {} trailing bytes",
            bytes.len() as u64 - expected
        )));
    }
    let (t, k, c) = (header.frames as usize, header.bins as usize, header.channels as usize);
    let n = t * k * c;
    let record = header.record_bytes() as usize;
    let records = bytes[HEADER_BYTES..]
        .chunks_exact(record)
        .map(|r| {
            let data = r[..n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok(Spectrogram {
                frames: t,
                bins: k,
                channels: c,
                data,
                label: decode_label(&r[n * 4..])?,
                normalized: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}
