use super::{EncoderConfig, Forward, MaskSpec, ReconTarget};
use crate::autodiff::{Bound, Real, Tape, Var};
use crate::error::{Error, Result};

fn masked_rows(masks: &[MaskSpec], n: usize) -> Vec<usize> {
    masks
        .iter()
        .enumerate()
        .flat_map(|(b, m)| m.indices.iter().map(move |&i| b * n + i))
        .collect()
}

/// Decoder MLP applied to the masked token rows only, in mask order.
pub fn decode_masked<T: Real>(tape: &mut Tape<T>, p: &Bound, tokens: Var, masks: &[MaskSpec]) -> Result<Var> {
    let (rows, _) = tape.value(tokens).dims2()?;
    if masks.is_empty() || rows % masks.len() != 0 {
        return Err(Error::shape("one mask per sequence required"));
    }
    let idx = masked_rows(masks, rows / masks.len());
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let z = tape.gather_rows(tokens, &idx)?;
    let h = tape.matmul(z, p.get("dec.w1")?)?;
    let h = tape.add_row(h, p.get("dec.b1")?)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, p.get("dec.w2")?)?;
    tape.add_row(h, p.get("dec.b2")?)
}

/// Reconstruction targets aligned with [`decode_masked`]. Embedding targets
/// are detached so no gradient reaches the embedding through them.
pub fn recon_targets<T: Real>(tape: &mut Tape<T>, fwd: &Forward, masks: &[MaskSpec], target: ReconTarget) -> Result<Var> {
    let idx = masked_rows(masks, fwd.n_tokens);
    match target {
        ReconTarget::RawPatch => tape.gather_rows(fwd.patches, &idx),
        ReconTarget::Embedding => {
            let x = tape.detach(fwd.embeddings);
            tape.gather_rows(x, &idx)
        }
    }
}

/// Unit-norm projection `(h W_p + b_p) / ||.||` of each row of `h`.
pub fn project_contrastive<T: Real>(tape: &mut Tape<T>, p: &Bound, h: Var) -> Result<Var> {
    let y = tape.matmul(h, p.get("proj.w")?)?;
    let y = tape.add_row(y, p.get("proj.b")?)?;
    tape.l2_normalize(y)
}

/// Residual conv1d classifier over pooled vectors `[B, d] -> [B, classes]`.
///
/// Each pooled vector is a one-channel sequence of length `d`. It is copied
/// onto all `C` channels, passed through `h + conv(relu(conv(h)))` blocks
/// with same padding, averaged over positions, then mapped linearly.
pub fn classify<T: Real>(tape: &mut Tape<T>, cfg: &EncoderConfig, p: &Bound, pooled: Var) -> Result<Var> {
    let (batch, _) = tape.value(pooled).dims2()?;
    let c = cfg.cls_channels;
    let mut feats = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = tape.slice(pooled, 0, b, 1)?;
        let mut h = if c == 1 { row } else { tape.concat(&vec![row; c], 0)? };
        for j in 0..cfg.cls_blocks {
            let u = tape.conv1d(h, p.get(&format!("cls.block{j}.w1"))?, p.get(&format!("cls.block{j}.b1"))?, 1)?;
            let u = tape.relu(u)?;
            let u = tape.conv1d(u, p.get(&format!("cls.block{j}.w2"))?, p.get(&format!("cls.block{j}.b2"))?, 1)?;
            h = tape.add(h, u)?;
        }
        let gap = tape.mean_axis(h, 1)?;
        feats.push(tape.reshape(gap, &[1, c])?);
    }
    let f = if batch == 1 { feats[0] } else { tape.concat(&feats, 0)? };
    debug_assert_eq!(tape.shape(f), [batch, c]);
    let y = tape.matmul(f, p.get("cls.w")?)?;
    tape.add_row(y, p.get("cls.b")?)
}
