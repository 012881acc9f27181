use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"SFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copy of every tensor whose name starts with `prefix`, prefix kept.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// SHA-256 over names, shapes and the little-endian value bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Put every tensor on `tape` as a leaf. Names for which `trainable`
    /// returns false become constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k))))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradients of the bound parameters after `tape.backward`; parameters
    /// that received no gradient are left out.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .vars
                .iter()
                .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g)))
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

/// Parameters plus free-form JSON metadata (model configuration).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore<f32>,
}

/// Layout: magic `SFCK`, `u32` version, `u64` index length, JSON index,
/// then every tensor as `f32` little-endian in index order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(ckpt.params.len());
    for (name, t) in &ckpt.params.tensors {
        entries.push(IndexEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        offset += t.numel() as u64 * 4;
    }
    let index = serde_json::to_vec(&Index {
        meta: ckpt.meta.clone(),
        tensors: entries,
    })?;
    let mut buf = Vec::with_capacity(16 + index.len() + offset as usize);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(index.len() as u64).to_le_bytes());
    buf.extend_from_slice(&index);
    for t in ckpt.params.tensors.values() {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let truncated = |expected: usize| Error::TruncatedShard {
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 16 {
        return Err(truncated(16));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let ilen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16 + ilen;
    if bytes.len() < data_start {
        return Err(truncated(data_start));
    }
    let index: Index = serde_json::from_slice(&bytes[16..data_start])?;
    let data = &bytes[data_start..];
    let mut params = ParamStore::new();
    for e in index.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > data.len() {
            return Err(truncated(data_start + end));
        }
        let values = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, values)?);
    }
    Ok(Checkpoint {
        meta: index.meta,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::new(vec![2, 2], vec![1.0f32, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap());
        params.insert("b", Tensor::scalar(0.1f32));
        let ckpt = Checkpoint {
            meta: serde_json::json!({"dim": 8}),
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::TruncatedShard { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadMagic(_))));
    }

    #[test]
    fn checksum_tracks_values() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap());
        let before = p.checksum();
        assert_eq!(before, p.clone().checksum());
        p.get_mut("w").unwrap().data[1] = 2.0 + 1e-15;
        assert_ne!(before, p.checksum());
    }
}
