//! Protocol experts behind a small gating transformer.
//!
//! Experts are ordered WIFI_LIKE, LTE_LIKE, NR_LIKE. The router shares the
//! experts' patch tokenization but has its own embedding width.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, Bound, Checkpoint, ParamStore, Real, Tape, Tensor, Var};
use crate::baseband::Protocol;
use crate::encoder::{classify, forward, init_backbone, patchify_batch, EncoderConfig};
use crate::error::{Error, Result};
use crate::objectives::{adamw_step, loss_ce, AdamW, CurveRow, OptimState, Schedule, Split};
use crate::seed;
use crate::specgen::{NormStats, Spectrogram};

pub const N_EXPERTS: usize = 3;
pub const EXPERT_ORDER: [Protocol; N_EXPERTS] = [Protocol::WifiLike, Protocol::LteLike, Protocol::NrLike];

/// One protocol expert: encoder configuration and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub cfg: EncoderConfig,
    pub params: ParamStore<f32>,
}

impl Expert {
    /// Pooled representation `h_k` of one spectrogram (mean of final tokens).
    pub fn embed(&self, s: &Spectrogram) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let x = patchify_batch::<f32>(&[s], self.cfg.patch)?;
        let fwd = forward(&mut tape, &self.cfg, &p, x, 1, &[])?;
        Ok(tape.value(fwd.pooled).data.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub experts: Vec<Expert>,
    pub frozen: bool,
}

impl ExpertBank {
    pub fn new(experts: Vec<Expert>) -> Result<Self> {
        if experts.len() != N_EXPERTS {
            return Err(Error::config(format!("expected {N_EXPERTS} experts, got {}", experts.len())));
        }
        let (d, p) = (experts[0].cfg.dim, experts[0].cfg.patch);
        if experts.iter().any(|e| e.cfg.dim != d || e.cfg.patch != p) {
            return Err(Error::config("experts must share dim and patch size"));
        }
        Ok(Self { experts, frozen: true })
    }

    /// Three freshly initialised experts.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let experts = (0..N_EXPERTS)
            .map(|k| {
                Ok(Expert {
                    cfg: cfg.clone(),
                    params: init_backbone(cfg, seed::derive(seed, &[k as u64]))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(experts)
    }

    pub fn dim(&self) -> usize {
        self.experts[0].cfg.dim
    }

    /// Checksum over all experts in order.
    pub fn checksum(&self) -> String {
        self.experts.iter().map(|e| e.params.checksum()).collect::<Vec<_>>().join(":")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_mult: usize,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            depth: 2,
            ffn_mult: 2,
        }
    }
}

impl RouterConfig {
    /// Encoder configuration of the gating transformer for a given expert
    /// tokenization.
    pub fn encoder(&self, experts: &EncoderConfig) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            heads: self.heads,
            depth: self.depth,
            ffn_mult: self.ffn_mult,
            patch: experts.patch,
            max_tokens: experts.max_tokens,
            init_std: experts.init_std,
            ..EncoderConfig::default()
        }
    }
}

/// Gating network: transformer backbone plus `router.w: [d_r, 3]`, `router.b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub cfg: EncoderConfig,
    pub params: ParamStore<f32>,
}

impl RouterParams {
    pub fn init(rc: &RouterConfig, experts: &EncoderConfig, seed: u64) -> Result<Self> {
        let cfg = rc.encoder(experts);
        let mut params = init_backbone(&cfg, seed::derive(seed, &[0xA0]))?;
        params.tensors.remove("mask_token");
        let mut rng = seed::rng(seed::derive(seed, &[seed::stream::INIT, 0xA1]));
        let std = (1.0 / cfg.dim as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
        params.insert(
            "router.w",
            Tensor::from_fn(&[cfg.dim, N_EXPERTS], |_| rand_distr::Distribution::<f64>::sample(&normal, &mut rng) as f32),
        );
        params.insert("router.b", Tensor::zeros(&[N_EXPERTS]));
        Ok(Self { cfg, params })
    }
}

/// Router logits `[B, 3]`: transformer, average over tokens, linear map.
pub fn router_logits<T: Real>(tape: &mut Tape<T>, cfg: &EncoderConfig, p: &Bound, patches: Tensor<T>, batch: usize) -> Result<Var> {
    let fwd = forward(tape, cfg, p, patches, batch, &[])?;
    let y = tape.matmul(fwd.pooled, p.get("router.w")?)?;
    tape.add_row(y, p.get("router.b")?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RouteMode {
    Dense,
    #[default]
    Top1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub weights: [f64; N_EXPERTS],
    pub chosen: usize,
}

/// Index of the largest weight; ties go to the lowest index.
pub fn argmax_lowest(w: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in w.iter().enumerate() {
        if v > w[best] {
            best = k;
        }
    }
    best
}

impl RouteDecision {
    pub fn from_weights(weights: [f64; N_EXPERTS]) -> Self {
        Self {
            chosen: argmax_lowest(&weights),
            weights,
        }
    }

    pub fn protocol(&self) -> Protocol {
        EXPERT_ORDER[self.chosen]
    }
}

fn softmax3(logits: &[f32]) -> [f64; N_EXPERTS] {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    [e[0] / z, e[1] / z, e[2] / z]
}

/// Gating weights for a batch of spectrograms.
pub fn route_batch(specs: &[&Spectrogram], router: &RouterParams) -> Result<Vec<RouteDecision>> {
    let mut tape = Tape::new();
    let p = router.params.bind(&mut tape, |_| false);
    let x = patchify_batch::<f32>(specs, router.cfg.patch)?;
    let logits = router_logits(&mut tape, &router.cfg, &p, x, specs.len())?;
    Ok(tape
        .value(logits)
        .data
        .chunks(N_EXPERTS)
        .map(|row| RouteDecision::from_weights(softmax3(row)))
        .collect())
}

pub fn route(s: &Spectrogram, router: &RouterParams) -> Result<RouteDecision> {
    Ok(route_batch(&[s], router)?.remove(0))
}

/// Combine expert outputs. `DENSE` needs all three; `TOP1` needs only the
/// chosen one and returns it unchanged.
pub fn aggregate(decision: &RouteDecision, outputs: &[Option<Vec<f32>>], mode: RouteMode) -> Result<Vec<f32>> {
    match mode {
        RouteMode::Top1 => outputs
            .get(decision.chosen)
            .and_then(Clone::clone)
            .ok_or(Error::MissingExpertOutput(decision.chosen)),
        RouteMode::Dense => {
            let mut acc: Option<Vec<f32>> = None;
            for k in 0..N_EXPERTS {
                let h = outputs.get(k).and_then(Option::as_ref).ok_or(Error::MissingExpertOutput(k))?;
                let g = decision.weights[k] as f32;
                let a = acc.get_or_insert_with(|| vec![0.0; h.len()]);
                if a.len() != h.len() {
                    return Err(Error::shape("expert outputs differ in width"));
                }
                for (o, &v) in a.iter_mut().zip(h) {
                    *o += g * v;
                }
            }
            Ok(acc.unwrap_or_default())
        }
    }
}

/// Result of one MoE inference.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    pub decision: RouteDecision,
    pub embedding: Vec<f32>,
    pub logits: Option<Vec<f32>>,
    /// Expert forward passes spent on this input.
    pub expert_evals: usize,
}

/// Instrumented expert evaluation for cost accounting.
#[derive(Debug, Default)]
pub struct EvalCounter {
    pub router: Cell<usize>,
    pub experts: Cell<usize>,
}

/// Route, evaluate the needed experts, aggregate and optionally apply a
/// classifier head (`cls.*` parameters) to the aggregated embedding.
pub fn moe_infer(
    s: &Spectrogram,
    router: &RouterParams,
    bank: &ExpertBank,
    mode: RouteMode,
    head: Option<(&EncoderConfig, &ParamStore<f32>)>,
    counter: &EvalCounter,
) -> Result<MoeOutput> {
    let decision = route(s, router)?;
    counter.router.set(counter.router.get() + 1);
    let needed: Vec<usize> = match mode {
        RouteMode::Top1 => vec![decision.chosen],
        RouteMode::Dense => (0..N_EXPERTS).collect(),
    };
    let mut outputs: Vec<Option<Vec<f32>>> = vec![None; N_EXPERTS];
    for &k in &needed {
        outputs[k] = Some(bank.experts[k].embed(s)?);
        counter.experts.set(counter.experts.get() + 1);
    }
    let embedding = aggregate(&decision, &outputs, mode)?;
    let logits = match head {
        Some((cfg, params)) => {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, |_| false);
            let h = tape.constant(Tensor::new(vec![1, embedding.len()], embedding.clone())?);
            let y = classify(&mut tape, cfg, &p, h)?;
            Some(tape.value(y).data.clone())
        }
        None => None,
    };
    Ok(MoeOutput {
        decision,
        embedding,
        logits,
        expert_evals: needed.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterTrainConfig {
    pub router: RouterConfig,
    pub schedule: Schedule,
    pub optimizer: AdamW,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        Self {
            router: RouterConfig::default(),
            schedule: Schedule {
                base_lr: 3e-3,
                warmup_epochs: 1.0,
                total_epochs: 12,
                floor_lr: 1e-8,
            },
            optimizer: AdamW::default(),
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RouterOutcome {
    pub router: RouterParams,
    pub curve: Vec<CurveRow>,
    pub warnings: Vec<String>,
}

/// Fit the gating network to protocol labels with the experts untouched.
/// The bank is only read, so its parameters cannot change.
pub fn train_router(bank: &ExpertBank, data: &[Spectrogram], cfg: &RouterTrainConfig) -> Result<RouterOutcome> {
    if data.is_empty() {
        return Err(Error::config("router training needs data"));
    }
    cfg.schedule.validate()?;
    let expert_cfg = &bank.experts[0].cfg;
    let mut router = RouterParams::init(&cfg.router, expert_cfg, cfg.seed)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label.protocol.index()).collect();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut warnings = Vec::new();
    let (lo, hi) = (counts.values().min().copied(), counts.values().max().copied());
    if counts.len() < N_EXPERTS || lo != hi {
        warnings.push(format!("unbalanced router dataset: per-protocol counts {counts:?}"));
    }
    let plen = router.cfg.patch_len();
    let grids: Vec<Tensor<f32>> = data
        .iter()
        .map(|s| patchify_batch::<f32>(&[s], router.cfg.patch))
        .collect::<Result<_>>()?;
    let mut state = OptimState::new(cfg.optimizer);
    let mut curve = Vec::new();
    for epoch in 0..cfg.schedule.total_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &[seed::stream::SHUFFLE, epoch as u64])));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size.max(1)).collect();
        let (mut total, mut lr) = (0.0, 0.0);
        for (s, batch) in batches.iter().enumerate() {
            lr = cfg.schedule.lr(epoch as f64 + s as f64 / batches.len() as f64);
            let mut x = Vec::with_capacity(batch.len() * grids[0].numel());
            for &i in *batch {
                x.extend_from_slice(&grids[i].data);
            }
            let rows = x.len() / plen;
            let mut tape = Tape::new();
            let p = router.params.bind(&mut tape, |_| true);
            let logits = router_logits(&mut tape, &router.cfg, &p, Tensor::new(vec![rows, plen], x)?, batch.len())?;
            let l: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let ce = loss_ce(&mut tape, logits, &l)?;
            total += tape.value(ce).item() as f64 * batch.len() as f64;
            tape.backward(ce)?;
            adamw_step(&mut router.params, &p.grads(&tape), &mut state, |_| lr)?;
        }
        curve.push(CurveRow {
            epoch,
            split: Split::Train,
            l_recon: None,
            l_cont: None,
            l_cls: Some(total / data.len() as f64),
            lr,
        });
    }
    Ok(RouterOutcome {
        router,
        curve,
        warnings,
    })
}

/// Fraction of spectrograms routed to the expert of their own protocol.
pub fn routing_accuracy(router: &RouterParams, data: &[Spectrogram], batch_size: usize) -> Result<f64> {
    let mut hits = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Spectrogram> = chunk.iter().collect();
        for (d, s) in route_batch(&refs, router)?.iter().zip(chunk) {
            hits += usize::from(d.protocol() == s.label.protocol);
        }
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// MoE bundle manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub router_ckpt: PathBuf,
    pub expert_ckpts: [PathBuf; N_EXPERTS],
    pub expert_order: [Protocol; N_EXPERTS],
    pub mode_default: RouteMode,
    /// Normalization the experts were trained with.
    #[serde(default)]
    pub norm_stats: Option<NormStats>,
}

pub const BUNDLE_FILE: &str = "moe.json";

fn encoder_meta(cfg: &EncoderConfig, role: &str) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "role": role, "encoder": serde_json::to_value(cfg)? }))
}

/// Encoder configuration stored in a checkpoint's metadata.
pub fn checkpoint_encoder(ckpt: &Checkpoint) -> Result<EncoderConfig> {
    let v = ckpt
        .meta
        .get("encoder")
        .ok_or_else(|| Error::config("checkpoint has no encoder configuration"))?;
    Ok(serde_json::from_value(v.clone())?)
}

pub fn save_bundle(
    dir: &Path,
    router: &RouterParams,
    bank: &ExpertBank,
    mode: RouteMode,
    norm_stats: Option<NormStats>,
) -> Result<BundleManifest> {
    let router_ckpt = PathBuf::from("router.ckpt");
    save_checkpoint(
        &dir.join(&router_ckpt),
        &Checkpoint {
            meta: encoder_meta(&router.cfg, "router")?,
            params: router.params.clone(),
        },
    )?;
    let mut expert_ckpts: [PathBuf; N_EXPERTS] = Default::default();
    for (k, e) in bank.experts.iter().enumerate() {
        let name = PathBuf::from(format!("expert_{}.ckpt", EXPERT_ORDER[k].name()));
        save_checkpoint(
            &dir.join(&name),
            &Checkpoint {
                meta: encoder_meta(&e.cfg, "expert")?,
                params: e.params.clone(),
            },
        )?;
        expert_ckpts[k] = name;
    }
    let manifest = BundleManifest {
        router_ckpt,
        expert_ckpts,
        expert_order: EXPERT_ORDER,
        mode_default: mode,
        norm_stats,
    };
    let path = dir.join(BUNDLE_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<(BundleManifest, RouterParams, ExpertBank)> {
    let path = dir.join(BUNDLE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BundleManifest = serde_json::from_str(&text)?;
    if manifest.expert_order != EXPERT_ORDER {
        return Err(Error::config("bundle expert order differs from WIFI_LIKE, LTE_LIKE, NR_LIKE"));
    }
    let rc = load_checkpoint(&dir.join(&manifest.router_ckpt))?;
    let router = RouterParams {
        cfg: checkpoint_encoder(&rc)?,
        params: rc.params,
    };
    let experts = manifest
        .expert_ckpts
        .iter()
        .map(|p| {
            let c = load_checkpoint(&dir.join(p))?;
            Ok(Expert {
                cfg: checkpoint_encoder(&c)?,
                params: c.params,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, router, ExpertBank::new(experts)?))
}

#[cfg(test)]
mod tests;
