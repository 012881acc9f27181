use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::encode_pooled;
use crate::specgen::Spectrogram;

pub const EMBEDDING_HEADER: &str = "sample_id\tprotocol\tmodulation\tsnr_db\tmobility\tdoppler_hz\tseed";

/// Embedding table, one row per spectrogram in input order.
pub fn embeddings_tsv(data: &[Spectrogram], emb: &Tensor<f32>) -> Result<String> {
    let (n, d) = emb.dims2()?;
    if n != data.len() {
        return Err(Error::shape(format!("{n} embeddings for {} spectrograms", data.len())));
    }
    let mut out = String::from(EMBEDDING_HEADER);
    for j in 0..d {
        let _ = write!(out, "\te{j}");
    }
    out.push('\n');
    for (i, s) in data.iter().enumerate() {
        let l = &s.label;
        let _ = write!(
            out,
            "{i}\t{}\t{}\t{}\t{}\t{}\t{}",
            l.protocol.name(),
            l.modulation.name(),
            l.snr_db,
            l.mobility.name(),
            l.doppler_hz,
            l.seed
        );
        for v in emb.row(i) {
            let _ = write!(out, "\t{v:e}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Pooled embeddings of `data` written as TSV. Returns the row count.
pub fn export_embeddings(enc: &EncoderConfig, params: &ParamStore<f32>, data: &[Spectrogram], out: &Path) -> Result<usize> {
    let emb = encode_pooled(enc, params, data, 32)?;
    std::fs::write(out, embeddings_tsv(data, &emb)?).map_err(|e| Error::io(out, e))?;
    Ok(data.len())
}

/// Min-max scaling to `0..=255`; a constant input maps to 0.
pub fn quantize(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    let scale = 255.0 / (hi as f64 - lo as f64);
    values
        .iter()
        .map(|&v| ((v as f64 - lo as f64) * scale).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary PGM (P5) with width = frequency bins and height = frames.
pub fn render(s: &Spectrogram, out: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", s.bins, s.frames).into_bytes();
    bytes.extend(quantize(&s.data[..s.frames * s.bins]));
    std::fs::write(out, bytes).map_err(|e| Error::io(out, e))
}

/// Parse a binary PGM written by [`render`]: `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::shape("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::shape("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::shape(format!("bad PGM field {s}")));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(|| Error::shape("truncated PGM data"))?;
    Ok((w, h, pixels.to_vec()))
}
