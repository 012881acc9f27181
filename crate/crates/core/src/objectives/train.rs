use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, clip_grad_norm, AdamW, OptimState, Schedule};
use super::{combine_losses, loss_ce, masked_losses, LossWeights};
use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::encoder::{classify, forward, patchify, sample_mask, EncoderConfig, MaskSpec};
use crate::error::{Error, Result};
use crate::seed;
use crate::specgen::Spectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One line of the loss-curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: Split,
    pub l_recon: Option<f64>,
    pub l_cont: Option<f64>,
    pub l_cls: Option<f64>,
    pub lr: f64,
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.8e}"));
    let mut out = String::from("epoch,split,L_recon,L_cont,L_cls,lr\n");
    for r in rows {
        let split = match r.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        let _ = writeln!(
            out,
            "{},{split},{},{},{},{:.8e}",
            r.epoch,
            cell(r.l_recon),
            cell(r.l_cont),
            cell(r.l_cls),
            r.lr
        );
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a loss to be minimised.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best - self.min_delta || (self.best_epoch.is_none() && loss.is_finite()) {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            return StopDecision::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    idx
}

/// Batches in which every class that appears has at least two members
/// (classes with a single sample necessarily appear alone).
pub fn stratified_batches(labels: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seed::rng(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (_, mut members) in by_class {
        members.shuffle(&mut rng);
        let mut chunks: Vec<Vec<usize>> = members.chunks(2).map(<[usize]>::to_vec).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
            let odd = chunks.pop().expect("non-empty");
            chunks.last_mut().expect("non-empty").extend(odd);
        }
        groups.extend(chunks);
    }
    groups.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for g in groups {
        if !cur.is_empty() && cur.len() + g.len() > batch_size.max(2) {
            batches.push(std::mem::take(&mut cur));
        }
        cur.extend(g);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

fn stack(grids: &[Vec<f32>], idx: &[usize], plen: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(idx.iter().map(|&i| grids[i].len()).sum());
    for &i in idx {
        data.extend_from_slice(&grids[i]);
    }
    let rows = data.len() / plen;
    Tensor::new(vec![rows, plen], data)
}

fn patch_all(cfg: &EncoderConfig, data: &[Spectrogram]) -> Result<(Vec<Vec<f32>>, usize)> {
    let mut n = None;
    let grids = data
        .iter()
        .map(|s| {
            let g = patchify(s, cfg.patch)?;
            if *n.get_or_insert(g.n_tokens()) != g.n_tokens() {
                return Err(Error::shape("spectrograms differ in size"));
            }
            Ok(g.patches)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grids, n.unwrap_or(0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// `total_epochs` of the schedule is the epoch budget.
    pub schedule: Schedule,
    pub optimizer: AdamW,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            optimizer: AdamW::default(),
            batch_size: 16,
            val_fraction: 0.1,
            patience: 10,
            min_delta: 1e-4,
            clip_norm: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Parameters at the best validation epoch.
    pub params: ParamStore<f32>,
    pub curve: Vec<CurveRow>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
    pub val_indices: Vec<usize>,
}

impl PretrainOutcome {
    /// Validation reconstruction loss after each epoch.
    pub fn val_curve(&self) -> Vec<f64> {
        self.curve
            .iter()
            .filter(|r| r.split == Split::Val)
            .filter_map(|r| r.l_recon)
            .collect()
    }
}

/// Mean masked-reconstruction loss of `params` over `grids` with fixed masks.
pub fn evaluate_recon(
    cfg: &EncoderConfig,
    params: &ParamStore<f32>,
    grids: &[Vec<f32>],
    masks: &[MaskSpec],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..grids.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let m: Vec<MaskSpec> = chunk.iter().map(|&i| masks[i].clone()).collect();
        let t = masked_losses(&mut tape, cfg, &p, stack(grids, chunk, cfg.patch_len())?, &m, None, 1.0)?;
        total += tape.value(t.recon).item() as f64 * chunk.len() as f64;
    }
    Ok(total / grids.len() as f64)
}

/// Masked-modeling pretraining with early stopping on validation loss.
pub fn pretrain(
    enc: &EncoderConfig,
    mut params: ParamStore<f32>,
    data: &[Spectrogram],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if data.len() < 2 {
        return Err(Error::config("pretraining needs at least two spectrograms"));
    }
    cfg.schedule.validate()?;
    let (grids, n_tok) = patch_all(enc, data)?;
    let order = shuffled(data.len(), seed::derive(cfg.seed, &[seed::stream::SPLIT]));
    let n_val = ((cfg.val_fraction * data.len() as f64).ceil() as usize).clamp(1, data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_grids: Vec<Vec<f32>> = val_idx.iter().map(|&i| grids[i].clone()).collect();
    let val_masks = val_idx
        .iter()
        .map(|&i| sample_mask(n_tok, enc.mask_ratio, seed::derive(cfg.seed, &[seed::stream::MASK, u64::MAX, i as u64])))
        .collect::<Result<Vec<_>>>()?;

    let mut state = OptimState::new(cfg.optimizer);
    let mut stop = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best = params.clone();
    let mut curve = Vec::new();
    let epochs = cfg.schedule.total_epochs;
    let mut epochs_run = 0;
    for epoch in 0..epochs {
        let perm = shuffled(train_idx.len(), seed::derive(cfg.seed, &[seed::stream::SHUFFLE, epoch as u64]));
        let batches: Vec<Vec<usize>> = perm
            .chunks(cfg.batch_size.max(1))
            .map(|c| c.iter().map(|&k| train_idx[k]).collect())
            .collect();
        let mut train_loss = 0.0;
        let mut lr = 0.0;
        for (s, batch) in batches.iter().enumerate() {
            lr = cfg.schedule.lr(epoch as f64 + s as f64 / batches.len() as f64);
            let masks = batch
                .iter()
                .map(|&i| {
                    let sd = seed::derive(cfg.seed, &[seed::stream::MASK, epoch as u64, i as u64]);
                    sample_mask(n_tok, enc.mask_ratio, sd)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, |_| true);
            let t = masked_losses(&mut tape, enc, &p, stack(&grids, batch, enc.patch_len())?, &masks, None, 1.0)?;
            train_loss += tape.value(t.recon).item() as f64 * batch.len() as f64;
            tape.backward(t.recon)?;
            let mut g = p.grads(&tape);
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut g, c);
            }
            adamw_step(&mut params, &g, &mut state, |_| lr)?;
        }
        let val = evaluate_recon(enc, &params, &val_grids, &val_masks, cfg.batch_size)?;
        curve.push(CurveRow {
            epoch,
            split: Split::Train,
            l_recon: Some(train_loss / train_idx.len() as f64),
            l_cont: None,
            l_cls: None,
            lr,
        });
        curve.push(CurveRow {
            epoch,
            split: Split::Val,
            l_recon: Some(val),
            l_cont: None,
            l_cls: None,
            lr,
        });
        epochs_run = epoch + 1;
        match stop.update(epoch, val) {
            StopDecision::Improved => best = params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok(PretrainOutcome {
        params: best,
        curve,
        best_epoch: stop.best_epoch.unwrap_or(0),
        best_val: stop.best,
        epochs_run,
        val_indices: val_idx.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Encoder fixed; only the classifier head learns, on cross-entropy.
    #[default]
    Frozen,
    /// Everything learns on the joint objective plus cross-entropy, the
    /// backbone at a reduced learning rate.
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub schedule: Schedule,
    pub optimizer: AdamW,
    pub batch_size: usize,
    pub encoder_lr_factor: f64,
    pub weights: LossWeights,
    pub ce_weight: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Frozen,
            schedule: Schedule {
                base_lr: 1e-3,
                warmup_epochs: 2.0,
                total_epochs: 60,
                floor_lr: 1e-8,
            },
            optimizer: AdamW::default(),
            batch_size: 16,
            encoder_lr_factor: 0.1,
            weights: LossWeights::default(),
            ce_weight: 1.0,
            patience: 10,
            min_delta: 1e-4,
            clip_norm: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ParamStore<f32>,
    pub curve: Vec<CurveRow>,
    pub epochs_run: usize,
}

/// Pooled encoder representations `[n, d]` of unmasked inputs.
pub fn encode_pooled(enc: &EncoderConfig, params: &ParamStore<f32>, data: &[Spectrogram], batch_size: usize) -> Result<Tensor<f32>> {
    let (grids, _) = patch_all(enc, data)?;
    let mut out = Vec::with_capacity(data.len() * enc.dim);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let fwd = forward(&mut tape, enc, &p, stack(&grids, chunk, enc.patch_len())?, chunk.len(), &[])?;
        out.extend_from_slice(&tape.value(fwd.pooled).data);
    }
    Tensor::new(vec![data.len(), enc.dim], out)
}

fn is_head(name: &str) -> bool {
    name.starts_with("cls.") || name.starts_with("dec.") || name.starts_with("proj.")
}

fn head_ce(enc: &EncoderConfig, head: &ParamStore<f32>, feats: &Tensor<f32>, idx: &[usize], labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = head.bind(&mut tape, |_| false);
    let f = tape.constant(feats.clone());
    let rows = tape.gather_rows(f, idx)?;
    let logits = classify(&mut tape, enc, &p, rows)?;
    let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let ce = loss_ce(&mut tape, logits, &l)?;
    Ok(tape.value(ce).item() as f64)
}

/// Train the `cls.*` head on precomputed features `[n, d]`. With `val` the
/// best-validation head is returned.
pub fn fit_head(
    enc: &EncoderConfig,
    mut head: ParamStore<f32>,
    feats: &Tensor<f32>,
    labels: &[usize],
    val: Option<(&Tensor<f32>, &[usize])>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let n = labels.len();
    if n == 0 || feats.dims2()?.0 != n {
        return Err(Error::config("fit_head needs one label per feature row"));
    }
    cfg.schedule.validate()?;
    let mut state = OptimState::new(cfg.optimizer);
    let mut stop = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut curve = Vec::new();
    let mut best_head = head.clone();
    let mut epochs_run = 0;
    for epoch in 0..cfg.schedule.total_epochs {
        let perm = shuffled(n, seed::derive(cfg.seed, &[seed::stream::SHUFFLE, epoch as u64]));
        let batches: Vec<&[usize]> = perm.chunks(cfg.batch_size.max(1)).collect();
        let (mut total, mut lr) = (0.0, 0.0);
        for (s, batch) in batches.iter().enumerate() {
            lr = cfg.schedule.lr(epoch as f64 + s as f64 / batches.len() as f64);
            let mut tape = Tape::new();
            let p = head.bind(&mut tape, |_| true);
            let f = tape.constant(feats.clone());
            let rows = tape.gather_rows(f, batch)?;
            let logits = classify(&mut tape, enc, &p, rows)?;
            let l: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let ce = loss_ce(&mut tape, logits, &l)?;
            total += tape.value(ce).item() as f64 * batch.len() as f64;
            tape.backward(ce)?;
            let mut g = p.grads(&tape);
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut g, c);
            }
            adamw_step(&mut head, &g, &mut state, |_| lr)?;
        }
        curve.push(CurveRow {
            epoch,
            split: Split::Train,
            l_recon: None,
            l_cont: None,
            l_cls: Some(total / n as f64),
            lr,
        });
        epochs_run = epoch + 1;
        if let Some((vf, vl)) = val {
            let idx: Vec<usize> = (0..vl.len()).collect();
            let v = head_ce(enc, &head, vf, &idx, vl)?;
            curve.push(CurveRow {
                epoch,
                split: Split::Val,
                l_recon: None,
                l_cont: None,
                l_cls: Some(v),
                lr,
            });
            match stop.update(epoch, v) {
                StopDecision::Improved => best_head = head.clone(),
                StopDecision::Continue => {}
                StopDecision::Stop => break,
            }
        } else {
            best_head = head.clone();
        }
    }
    Ok(FinetuneOutcome {
        params: best_head,
        curve,
        epochs_run,
    })
}

/// Class predictions of the `cls.*` head on features `[n, d]`.
pub fn predict_head(enc: &EncoderConfig, head: &ParamStore<f32>, feats: &Tensor<f32>) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let p = head.bind(&mut tape, |_| false);
    let f = tape.constant(feats.clone());
    let logits = classify(&mut tape, enc, &p, f)?;
    let v = tape.value(logits);
    let (_, c) = v.dims2()?;
    Ok(v
        .data
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Supervised training of the classifier head, and in `FineTune` mode of
/// the whole model. With `val` the best-validation parameters are returned.
pub fn finetune(
    enc: &EncoderConfig,
    mut params: ParamStore<f32>,
    data: &[Spectrogram],
    labels: &[usize],
    val: Option<(&[Spectrogram], &[usize])>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if data.len() != labels.len() || data.is_empty() {
        return Err(Error::config("finetune needs one label per spectrogram"));
    }
    cfg.schedule.validate()?;
    cfg.weights.validate()?;
    let mut state = OptimState::new(cfg.optimizer);
    let mut stop = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut curve = Vec::new();
    let mut best = params.clone();
    let epochs = cfg.schedule.total_epochs;
    let mut epochs_run = 0;

    match cfg.mode {
        FinetuneMode::Frozen => {
            let feats = encode_pooled(enc, &params, data, cfg.batch_size)?;
            let val_feats = match val {
                Some((v, l)) => Some((encode_pooled(enc, &params, v, cfg.batch_size)?, l)),
                None => None,
            };
            let fit = fit_head(enc, params.subset("cls."), &feats, labels, val_feats.as_ref().map(|(f, l)| (f, *l)), cfg)?;
            params.extend(fit.params);
            Ok(FinetuneOutcome {
                params,
                curve: fit.curve,
                epochs_run: fit.epochs_run,
            })
        }
        FinetuneMode::FineTune => {
            let (grids, n_tok) = patch_all(enc, data)?;
            let plen = enc.patch_len();
            for epoch in 0..epochs {
                let batches = stratified_batches(labels, cfg.batch_size, seed::derive(cfg.seed, &[seed::stream::SHUFFLE, epoch as u64]));
                let (mut sr, mut sc, mut sx, mut lr) = (0.0, 0.0, 0.0, 0.0);
                for (s, batch) in batches.iter().enumerate() {
                    lr = cfg.schedule.lr(epoch as f64 + s as f64 / batches.len() as f64);
                    let masks = batch
                        .iter()
                        .map(|&i| sample_mask(n_tok, enc.mask_ratio, seed::derive(cfg.seed, &[seed::stream::MASK, epoch as u64, i as u64])))
                        .collect::<Result<Vec<_>>>()?;
                    let l: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                    let mut tape = Tape::new();
                    let p = params.bind(&mut tape, |_| true);
                    let x = stack(&grids, batch, plen)?;
                    let with_pairs = batch.len() >= 2;
                    let t = masked_losses(&mut tape, enc, &p, x.clone(), &masks, with_pairs.then_some(&l[..]), cfg.weights.temperature)?;
                    let fwd = forward(&mut tape, enc, &p, x, batch.len(), &[])?;
                    let logits = classify(&mut tape, enc, &p, fwd.pooled)?;
                    let ce = loss_ce(&mut tape, logits, &l)?;
                    let joint = match t.cont {
                        Some(c) => {
                            sc += tape.value(c).item() as f64 * batch.len() as f64;
                            combine_losses(&mut tape, t.recon, c, &cfg.weights)?
                        }
                        None => tape.scale(t.recon, cfg.weights.lambda_recon)?,
                    };
                    let ce_w = tape.scale(ce, cfg.ce_weight)?;
                    let total = tape.add(joint, ce_w)?;
                    sr += tape.value(t.recon).item() as f64 * batch.len() as f64;
                    sx += tape.value(ce).item() as f64 * batch.len() as f64;
                    tape.backward(total)?;
                    let mut g = p.grads(&tape);
                    if let Some(c) = cfg.clip_norm {
                        clip_grad_norm(&mut g, c);
                    }
                    let factor = cfg.encoder_lr_factor;
                    adamw_step(&mut params, &g, &mut state, |name| if is_head(name) { lr } else { lr * factor })?;
                }
                let n = data.len() as f64;
                curve.push(CurveRow {
                    epoch,
                    split: Split::Train,
                    l_recon: Some(sr / n),
                    l_cont: Some(sc / n),
                    l_cls: Some(sx / n),
                    lr,
                });
                epochs_run = epoch + 1;
                if let Some((vd, vl)) = val {
                    let feats = encode_pooled(enc, &params, vd, cfg.batch_size)?;
                    let idx: Vec<usize> = (0..vl.len()).collect();
                    let v = head_ce(enc, &params.subset("cls."), &feats, &idx, vl)?;
                    curve.push(CurveRow {
                        epoch,
                        split: Split::Val,
                        l_recon: None,
                        l_cont: None,
                        l_cls: Some(v),
                        lr,
                    });
                    match stop.update(epoch, v) {
                        StopDecision::Improved => best = params.clone(),
                        StopDecision::Continue => {}
                        StopDecision::Stop => break,
                    }
                } else {
                    best = params.clone();
                }
            }
            Ok(FinetuneOutcome {
                params: best,
                curve,
                epochs_run,
            })
        }
    }
}
