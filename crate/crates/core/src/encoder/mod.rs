//! Patch-token transformer encoder with masked modeling and three heads.
//!
//! Parameter layout (row-vector convention, `y = x W + b`):
//!
//! | name                         | shape            |
//! |------------------------------|------------------|
//! | `emb.w`, `emb.b`             | `[P², d]`, `[d]` |
//! | `pos`                        | `[max_tokens, d]`|
//! | `mask_token`                 | `[d]`            |
//! | `layer{l}.{wq,wk,wv,wo}`     | `[d, d]`         |
//! | `layer{l}.ffn.{w1,b1,w2,b2}` | `[d, d_ff]`, `[d_ff]`, `[d_ff, d]`, `[d]` |
//! | `layer{l}.{ln1,ln2}.{g,b}`   | `[d]`            |
//! | `dec.{w1,b1,w2,b2}`          | `[d, d_ff]` ... `[d_ff, out]` |
//! | `proj.{w,b}`                 | `[d, d_p]`, `[d_p]` |
//! | `cls.block{j}.{w1,b1,w2,b2}` | `[C, C, 3]`, `[C]` |
//! | `cls.w`, `cls.b`             | `[C, classes]`, `[classes]` |
//!
//! Head `h` of the attention uses columns `h*d_h .. (h+1)*d_h` of `wq`, `wk`
//! and `wv`.

mod heads;
mod patch;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use heads::{classify, decode_masked, project_contrastive, recon_targets};
pub use patch::{patchify, patchify_batch, patchify_raw, unpatchify, PatchGrid};

use crate::autodiff::{Bound, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// Reconstruct the raw patch vector `s_i`.
    #[default]
    RawPatch,
    /// Reconstruct the token embedding `x_i`, with the target detached.
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub mask_ratio: f64,
    pub recon_target: ReconTarget,
    pub max_tokens: usize,
    /// Contrastive projection width; 0 selects `dim / 2`.
    pub proj_dim: usize,
    pub cls_channels: usize,
    pub cls_blocks: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            depth: 4,
            dim: 64,
            heads: 4,
            ffn_mult: 4,
            mask_ratio: 0.7,
            recon_target: ReconTarget::RawPatch,
            max_tokens: 1024,
            proj_dim: 0,
            cls_channels: 16,
            cls_blocks: 2,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    /// Full-size reference configuration: 12 layers, d = 128, 8 heads.
    pub fn reference() -> Self {
        Self {
            depth: 12,
            dim: 128,
            heads: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::config("patch, dim, heads and ffn_mult must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio must lie in [0, 1)"));
        }
        if self.init_std <= 0.0 {
            return Err(Error::config("init_std must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.dim * self.ffn_mult
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch
    }

    pub fn projection_dim(&self) -> usize {
        if self.proj_dim == 0 {
            (self.dim / 2).max(1)
        } else {
            self.proj_dim
        }
    }

    pub fn decoder_out(&self) -> usize {
        match self.recon_target {
            ReconTarget::RawPatch => self.patch_len(),
            ReconTarget::Embedding => self.dim,
        }
    }
}

/// Truncated normal at two standard deviations.
fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v as f32;
        }
    })
}

fn ones(n: usize) -> Tensor<f32> {
    Tensor::full(&[n], 1.0)
}

fn zeros(shape: &[usize]) -> Tensor<f32> {
    Tensor::zeros(shape)
}

/// Backbone parameters: embedding, positions, mask token and layers.
pub fn init_backbone(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::stream::INIT, 0]));
    let (d, f, std) = (cfg.dim, cfg.ffn_dim(), cfg.init_std);
    let mut p = ParamStore::new();
    p.insert("emb.w", trunc_normal(&mut rng, &[cfg.patch_len(), d], std));
    p.insert("emb.b", zeros(&[d]));
    p.insert("pos", trunc_normal(&mut rng, &[cfg.max_tokens, d], std));
    p.insert("mask_token", trunc_normal(&mut rng, &[d], std));
    for l in 0..cfg.depth {
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("layer{l}.{w}"), trunc_normal(&mut rng, &[d, d], std));
        }
        p.insert(format!("layer{l}.ffn.w1"), trunc_normal(&mut rng, &[d, f], std));
        p.insert(format!("layer{l}.ffn.b1"), zeros(&[f]));
        p.insert(format!("layer{l}.ffn.w2"), trunc_normal(&mut rng, &[f, d], std));
        p.insert(format!("layer{l}.ffn.b2"), zeros(&[d]));
        for ln in ["ln1", "ln2"] {
            p.insert(format!("layer{l}.{ln}.g"), ones(d));
            p.insert(format!("layer{l}.{ln}.b"), zeros(&[d]));
        }
    }
    Ok(p)
}

/// Reconstruction decoder and contrastive projector.
pub fn init_pretrain_heads(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::stream::INIT, 1]));
    let (d, f, std) = (cfg.dim, cfg.ffn_dim(), cfg.init_std);
    let (out, dp) = (cfg.decoder_out(), cfg.projection_dim());
    let mut p = ParamStore::new();
    p.insert("dec.w1", trunc_normal(&mut rng, &[d, f], std));
    p.insert("dec.b1", zeros(&[f]));
    p.insert("dec.w2", trunc_normal(&mut rng, &[f, out], std));
    p.insert("dec.b2", zeros(&[out]));
    p.insert("proj.w", trunc_normal(&mut rng, &[d, dp], std));
    p.insert("proj.b", zeros(&[dp]));
    Ok(p)
}

/// Residual 1-D convolutional classifier for `classes` outputs.
pub fn init_classifier(cfg: &EncoderConfig, classes: usize, seed: u64) -> Result<ParamStore<f32>> {
    if classes == 0 || cfg.cls_channels == 0 {
        return Err(Error::config("classifier needs classes and channels"));
    }
    let mut rng = seed::rng(seed::derive(seed, &[seed::stream::INIT, 2]));
    let c = cfg.cls_channels;
    // Fan-in scaled so the conv stack neither vanishes nor explodes at init.
    let conv_std = (2.0 / (3 * c) as f64).sqrt() * 0.5;
    let mut p = ParamStore::new();
    for j in 0..cfg.cls_blocks {
        p.insert(format!("cls.block{j}.w1"), trunc_normal(&mut rng, &[c, c, 3], conv_std));
        p.insert(format!("cls.block{j}.b1"), zeros(&[c]));
        p.insert(format!("cls.block{j}.w2"), trunc_normal(&mut rng, &[c, c, 3], conv_std));
        p.insert(format!("cls.block{j}.b2"), zeros(&[c]));
    }
    p.insert("cls.w", trunc_normal(&mut rng, &[c, classes], (1.0 / c as f64).sqrt()));
    p.insert("cls.b", zeros(&[classes]));
    Ok(p)
}

/// Backbone plus every head, as used for pretraining and fine-tuning.
pub fn init_model(cfg: &EncoderConfig, classes: Option<usize>, seed: u64) -> Result<ParamStore<f32>> {
    let mut p = init_backbone(cfg, seed)?;
    p.extend(init_pretrain_heads(cfg, seed)?);
    if let Some(k) = classes {
        p.extend(init_classifier(cfg, k, seed)?);
    }
    Ok(p)
}

/// Masked token indices for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// Distinct indices in ascending order.
    pub indices: Vec<usize>,
    pub n_tokens: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn empty(n_tokens: usize) -> Self {
        Self {
            indices: Vec::new(),
            n_tokens,
            ratio: 0.0,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Uniform sample of `floor(ratio * n)` distinct token indices.
pub fn sample_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let k = (ratio * n as f64).floor() as usize;
    let mut rng = seed::rng(seed::derive(seed, &[seed::stream::MASK]));
    let mut indices = index::sample(&mut rng, n, k).into_vec();
    indices.sort_unstable();
    Ok(MaskSpec {
        indices,
        n_tokens: n,
        ratio,
        seed,
    })
}

/// `x W_emb + b_emb` for a stacked patch matrix `[B*N, P²]`.
pub fn embed_tokens<T: Real>(tape: &mut Tape<T>, p: &Bound, patches: Var) -> Result<Var> {
    let xw = tape.matmul(patches, p.get("emb.w")?)?;
    tape.add_row(xw, p.get("emb.b")?)
}

/// Add the first `n` positional rows to each of the `batch` sequences.
pub fn add_positions<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, batch: usize) -> Result<Var> {
    let pos = p.get("pos")?;
    let (rows, _) = tape.value(x).dims2()?;
    let (max, _) = tape.value(pos).dims2()?;
    if batch == 0 || rows % batch != 0 {
        return Err(Error::shape(format!("{rows} token rows do not split into {batch} sequences")));
    }
    let n = rows / batch;
    if n > max {
        return Err(Error::SequenceTooLong { len: n, max });
    }
    let first = tape.slice(pos, 0, 0, n)?;
    let tiled = if batch == 1 {
        first
    } else {
        tape.concat(&vec![first; batch], 0)?
    };
    tape.add(x, tiled)
}

/// Replace the masked rows of each sequence by the shared mask token.
pub fn apply_mask<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, masks: &[MaskSpec]) -> Result<Var> {
    let (rows, d) = tape.value(x).dims2()?;
    let batch = masks.len();
    if batch == 0 || rows % batch != 0 {
        return Err(Error::shape("one mask per sequence required"));
    }
    let n = rows / batch;
    if masks.iter().all(MaskSpec::is_empty) {
        return Ok(x);
    }
    let token = tape.reshape(p.get("mask_token")?, &[1, d])?;
    let stacked = tape.concat(&[x, token], 0)?;
    let mut idx: Vec<usize> = (0..rows).collect();
    for (b, m) in masks.iter().enumerate() {
        for &i in &m.indices {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            idx[b * n + i] = rows;
        }
    }
    tape.gather_rows(stacked, &idx)
}

/// Attention probabilities of one head of one layer, recorded on request.
#[derive(Debug, Clone, Copy)]
pub struct AttentionRecord {
    pub layer: usize,
    pub sample: usize,
    pub head: usize,
    pub probs: Var,
}

fn msa<T: Real>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    p: &Bound,
    l: usize,
    z: Var,
    batch: usize,
    trace: &mut Option<&mut Vec<AttentionRecord>>,
) -> Result<Var> {
    let (rows, _) = tape.value(z).dims2()?;
    let n = rows / batch;
    let dh = cfg.head_dim();
    let q = tape.matmul(z, p.get(&format!("layer{l}.wq"))?)?;
    let k = tape.matmul(z, p.get(&format!("layer{l}.wk"))?)?;
    let v = tape.matmul(z, p.get(&format!("layer{l}.wv"))?)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut per_sample = Vec::with_capacity(batch);
    for b in 0..batch {
        let (qb, kb, vb) = if batch == 1 {
            (q, k, v)
        } else {
            (tape.slice(q, 0, b * n, n)?, tape.slice(k, 0, b * n, n)?, tape.slice(v, 0, b * n, n)?)
        };
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice(qb, 1, h * dh, dh)?;
            let kh = tape.slice(kb, 1, h * dh, dh)?;
            let vh = tape.slice(vb, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(AttentionRecord {
                    layer: l,
                    sample: b,
                    head: h,
                    probs: a,
                });
            }
            heads.push(tape.matmul(a, vh)?);
        }
        per_sample.push(if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? });
    }
    let cat = if batch == 1 {
        per_sample[0]
    } else {
        tape.concat(&per_sample, 0)?
    };
    tape.matmul(cat, p.get(&format!("layer{l}.wo"))?)
}

fn ffn<T: Real>(tape: &mut Tape<T>, p: &Bound, l: usize, z: Var) -> Result<Var> {
    let h = tape.matmul(z, p.get(&format!("layer{l}.ffn.w1"))?)?;
    let h = tape.add_row(h, p.get(&format!("layer{l}.ffn.b1"))?)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, p.get(&format!("layer{l}.ffn.w2"))?)?;
    tape.add_row(h, p.get(&format!("layer{l}.ffn.b2"))?)
}

/// Post-norm transformer layers over `batch` stacked sequences.
pub fn encoder_forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    p: &Bound,
    z0: Var,
    batch: usize,
    mut trace: Option<&mut Vec<AttentionRecord>>,
) -> Result<Var> {
    let (rows, d) = tape.value(z0).dims2()?;
    if d != cfg.dim || batch == 0 || rows % batch != 0 {
        return Err(Error::shape(format!("encoder input [{rows},{d}] for batch {batch}, dim {}", cfg.dim)));
    }
    let mut z = z0;
    for l in 0..cfg.depth {
        let a = msa(tape, cfg, p, l, z, batch, &mut trace)?;
        let r = tape.add(z, a)?;
        let zt = tape.layer_norm(r, p.get(&format!("layer{l}.ln1.g"))?, p.get(&format!("layer{l}.ln1.b"))?)?;
        let f = ffn(tape, p, l, zt)?;
        let r = tape.add(zt, f)?;
        z = tape.layer_norm(r, p.get(&format!("layer{l}.ln2.g"))?, p.get(&format!("layer{l}.ln2.b"))?)?;
    }
    Ok(z)
}

/// Mean over each sequence's tokens: `[B*N, d] -> [B, d]`.
pub fn mean_pool<T: Real>(tape: &mut Tape<T>, z: Var, batch: usize) -> Result<Var> {
    let (rows, _) = tape.value(z).dims2()?;
    if batch == 0 || rows % batch != 0 {
        return Err(Error::shape("pooling batch does not divide token rows"));
    }
    let n = rows / batch;
    let w = T::c(1.0 / n as f64);
    let avg = Tensor::from_fn(&[batch, rows], |q| if (q % rows) / n == q / rows { w } else { T::zero() });
    let avg = tape.constant(avg);
    tape.matmul(avg, z)
}

/// Handles produced by [`forward`].
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Patch matrix `[B*N, P²]` (constant).
    pub patches: Var,
    /// Token embeddings before positions and masking.
    pub embeddings: Var,
    /// Final-layer tokens `[B*N, d]`.
    pub tokens: Var,
    /// Mean-pooled representation `[B, d]`.
    pub pooled: Var,
    pub batch: usize,
    pub n_tokens: usize,
}

/// Patch matrix in, encoded tokens out. `masks` is either empty (no
/// masking) or holds one mask per sequence.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    p: &Bound,
    patches: Tensor<T>,
    batch: usize,
    masks: &[MaskSpec],
) -> Result<Forward> {
    let (rows, plen) = patches.dims2()?;
    if plen != cfg.patch_len() || batch == 0 || rows % batch != 0 {
        return Err(Error::shape(format!("patch matrix [{rows},{plen}] for batch {batch}")));
    }
    let patches = tape.constant(patches);
    let x = embed_tokens(tape, p, patches)?;
    let masked = if masks.is_empty() {
        x
    } else {
        if masks.len() != batch {
            return Err(Error::shape("one mask per sequence required"));
        }
        apply_mask(tape, p, x, masks)?
    };
    let z0 = add_positions(tape, p, masked, batch)?;
    let tokens = encoder_forward(tape, cfg, p, z0, batch, None)?;
    let pooled = mean_pool(tape, tokens, batch)?;
    Ok(Forward {
        patches,
        embeddings: x,
        tokens,
        pooled,
        batch,
        n_tokens: rows / batch,
    })
}

#[cfg(test)]
mod tests;
