//! Losses, optimizer, learning-rate schedule and training loops.

mod optim;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, clip_grad_norm, AdamW, OptimState, Schedule};
pub use train::{
    encode_pooled, evaluate_recon, finetune, fit_head, predict_head, pretrain, stratified_batches, write_curve_csv, CurveRow, EarlyStopping,
    FinetuneConfig, FinetuneMode, FinetuneOutcome, PretrainConfig, PretrainOutcome, Split, StopDecision,
};

use crate::autodiff::{Bound, Real, Tape, Tensor, Var};
use crate::encoder::{
    classify, decode_masked, forward, project_contrastive, recon_targets, EncoderConfig, Forward, MaskSpec,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_cont: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_recon: 1.0,
            lambda_cont: 0.3,
            temperature: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_recon < 0.0 || self.lambda_cont < 0.0 || !(self.temperature > 0.0) {
            return Err(Error::config("loss weights must be non-negative and temperature positive"));
        }
        Ok(())
    }
}

/// `(1/|M|) sum ||x_hat_i - x_i||²` over the stacked masked rows.
pub fn loss_recon<T: Real>(tape: &mut Tape<T>, recon: Var, target: Var) -> Result<Var> {
    let (rows, _) = tape.value(recon).dims2()?;
    if rows == 0 {
        return Err(Error::EmptyMask);
    }
    let d = tape.sub(recon, target)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / rows as f64)
}

/// Anchors, positives and candidates of a labelled batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchView {
    pub labels: Vec<usize>,
    /// `positives[i]`: indices `p != i` with the same label.
    pub positives: Vec<Vec<usize>>,
}

impl BatchView {
    pub fn new(labels: &[usize]) -> Self {
        let positives = (0..labels.len())
            .map(|i| (0..labels.len()).filter(|&p| p != i && labels[p] == labels[i]).collect())
            .collect();
        Self {
            labels: labels.to_vec(),
            positives,
        }
    }

    /// Candidates `A(i)`: every index but `i`.
    pub fn candidates(&self, i: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&a| a != i).collect()
    }
}

/// Supervised contrastive loss over unit rows `z: [B, d_p]`, summed over
/// anchors that have at least one positive.
pub fn loss_supcon<T: Real>(tape: &mut Tape<T>, z: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let (b, _) = tape.value(z).dims2()?;
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    let view = BatchView::new(labels);
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let s = tape.scale(sim, 1.0 / tau)?;
    let e = tape.exp(s)?;
    let off = tape.constant(Tensor::from_fn(&[b, b], |q| if q / b == q % b { T::zero() } else { T::one() }));
    let e_off = tape.mul(e, off)?;
    let den = tape.sum_axis(e_off, 1)?;
    let log_den = tape.log(den)?;
    let active = tape.constant(Tensor::from_fn(&[b, 1], |i| {
        if view.positives[i].is_empty() {
            T::zero()
        } else {
            T::one()
        }
    }));
    let mut w = Tensor::zeros(&[b, b]);
    for (i, pos) in view.positives.iter().enumerate() {
        for &p in pos {
            w.data[i * b + p] = T::c(1.0 / pos.len() as f64);
        }
    }
    let w = tape.constant(w);
    let a = tape.mul(log_den, active)?;
    let a = tape.sum(a)?;
    let pos = tape.mul(s, w)?;
    let pos = tape.sum(pos)?;
    tape.sub(a, pos)
}

/// Mean cross-entropy of `logits: [B, C]` against class indices.
pub fn loss_ce<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape.value(logits).dims2()?;
    if labels.len() != b || b == 0 {
        return Err(Error::shape(format!("{} labels for {b} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index { index: bad, len: c });
    }
    let lp = tape.log_softmax(logits)?;
    let onehot = tape.constant(Tensor::from_fn(&[b, c], |q| {
        if labels[q / c] == q % c {
            T::one()
        } else {
            T::zero()
        }
    }));
    let picked = tape.mul(lp, onehot)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / b as f64)
}

/// `lambda_recon * L_recon + lambda_cont * L_cont`.
pub fn combine_losses<T: Real>(tape: &mut Tape<T>, recon: Var, cont: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(recon, w.lambda_recon)?;
    let b = tape.scale(cont, w.lambda_cont)?;
    tape.add(a, b)
}

/// Loss handles of one masked forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub forward: Forward,
    pub recon: Var,
    /// Present when labels were supplied.
    pub cont: Option<Var>,
}

/// Masked forward, reconstruction loss and (with labels) the contrastive
/// loss on the projected pooled representation of the same pass.
pub fn masked_losses<T: Real>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    p: &Bound,
    patches: Tensor<T>,
    masks: &[MaskSpec],
    labels: Option<&[usize]>,
    tau: f64,
) -> Result<LossTerms> {
    let fwd = forward(tape, cfg, p, patches, masks.len(), masks)?;
    let rec = decode_masked(tape, p, fwd.tokens, masks)?;
    let tgt = recon_targets(tape, &fwd, masks, cfg.recon_target)?;
    let recon = loss_recon(tape, rec, tgt)?;
    let cont = match labels {
        Some(l) => {
            let z = project_contrastive(tape, p, fwd.pooled)?;
            Some(loss_supcon(tape, z, l, tau)?)
        }
        None => None,
    };
    Ok(LossTerms {
        forward: fwd,
        recon,
        cont,
    })
}

/// Classification logits of an unmasked pass.
pub fn logits<T: Real>(tape: &mut Tape<T>, cfg: &EncoderConfig, p: &Bound, patches: Tensor<T>, batch: usize) -> Result<Var> {
    let fwd = forward(tape, cfg, p, patches, batch, &[])?;
    classify(tape, cfg, p, fwd.pooled)
}

/// Largest absolute difference between the gradient of the joint objective
/// and the weighted sum of the separately computed gradients.
pub fn gradient_decomposition_error(
    cfg: &EncoderConfig,
    params: &crate::autodiff::ParamStore<f64>,
    patches: &Tensor<f64>,
    masks: &[MaskSpec],
    labels: &[usize],
    w: &LossWeights,
) -> Result<f64> {
    let grads = |which: u8| -> Result<BTreeMap<String, Tensor<f64>>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| true);
        let t = masked_losses(&mut tape, cfg, &p, patches.clone(), masks, Some(labels), w.temperature)?;
        let cont = t.cont.expect("labels given");
        let root = match which {
            0 => combine_losses(&mut tape, t.recon, cont, w)?,
            1 => t.recon,
            _ => cont,
        };
        tape.backward(root)?;
        Ok(p.grads(&tape).tensors)
    };
    let (joint, gr, gc) = (grads(0)?, grads(1)?, grads(2)?);
    let mut worst = 0.0f64;
    for (name, gj) in &joint {
        for (k, &v) in gj.data.iter().enumerate() {
            let r = gr.get(name).map_or(0.0, |t| t.data[k]);
            let c = gc.get(name).map_or(0.0, |t| t.data[k]);
            worst = worst.max((v - (w.lambda_recon * r + w.lambda_cont * c)).abs());
        }
    }
    Ok(worst)
}
