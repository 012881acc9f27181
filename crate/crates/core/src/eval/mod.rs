//! Few-shot evaluation: stratified splits, head training, metrics and
//! export utilities.

mod export;
mod metrics;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use export::{embeddings_tsv, export_embeddings, quantize, read_pgm, render, EMBEDDING_HEADER};
pub use metrics::{accuracy, confusion, macro_f1, mean_std, per_class, ClassMetrics};

use crate::autodiff::{ParamStore, Tensor};
use crate::baseband::{Modulation, Protocol};
use crate::encoder::{init_backbone, init_classifier, init_pretrain_heads, EncoderConfig};
use crate::error::{Error, Result};
use crate::moe::{moe_infer, EvalCounter, ExpertBank, RouteMode, RouterParams};
use crate::objectives::{encode_pooled, finetune, fit_head, predict_head, FinetuneConfig, FinetuneMode};
use crate::seed;
use crate::specgen::Spectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    Modulation,
    SnrDoppler,
    Multiprotocol,
}

impl Task {
    /// Class names and the class index of every spectrogram.
    ///
    /// `SNR_DOPPLER` classes are the `(snr, mobility)` pairs present in the
    /// data, sorted by SNR then mobility.
    pub fn classes(self, data: &[Spectrogram]) -> (Vec<String>, Vec<usize>) {
        match self {
            Task::Modulation => (
                Modulation::ALL.iter().map(|m| m.name().to_string()).collect(),
                data.iter().map(|s| s.label.modulation.index()).collect(),
            ),
            Task::Multiprotocol => (
                Protocol::ALL.iter().map(|p| p.name().to_string()).collect(),
                data.iter().map(|s| s.label.protocol.index()).collect(),
            ),
            Task::SnrDoppler => {
                let key = |s: &Spectrogram| ((s.label.snr_db * 1000.0).round() as i64, s.label.mobility.index());
                let mut keys: Vec<(i64, usize)> = data.iter().map(key).collect();
                keys.sort_unstable();
                keys.dedup();
                let index: BTreeMap<(i64, usize), usize> = keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
                let names = keys
                    .iter()
                    .map(|&(snr, m)| {
                        let mob = crate::channel::MobilityKind::from_index(m).map_or("?", |k| k.name());
                        format!("{}dB_{mob}", snr as f64 / 1000.0)
                    })
                    .collect();
                (names, data.iter().map(|s| index[&key(s)]).collect())
            }
        }
    }
}

/// Disjoint per-class train/val/test index lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n_per_class: usize,
    pub n_val: usize,
    /// Test samples per class; `None` takes every remaining sample.
    pub n_test: Option<usize>,
    pub seed: u64,
    pub classes: Vec<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle each class with `seed` and cut it into train, val and test.
pub fn stratified_split(
    labels: &[usize],
    classes: &[String],
    n_per_class: usize,
    n_val: usize,
    n_test: Option<usize>,
    seed: u64,
) -> Result<SplitPlan> {
    let mut plan = SplitPlan {
        n_per_class,
        n_val,
        n_test,
        seed,
        classes: classes.to_vec(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, name) in classes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let required = n_per_class + n_val + n_test.unwrap_or(1);
        if idx.len() < required {
            return Err(Error::InsufficientSamples {
                class: name.clone(),
                available: idx.len(),
                required,
            });
        }
        idx.shuffle(&mut seed::rng(seed::derive(seed, &[seed::stream::SPLIT, c as u64])));
        let test_end = n_test.map_or(idx.len(), |t| n_per_class + n_val + t);
        plan.train.extend_from_slice(&idx[..n_per_class]);
        plan.val.extend_from_slice(&idx[n_per_class..n_per_class + n_val]);
        plan.test.extend_from_slice(&idx[n_per_class + n_val..test_end]);
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub n_per_class: usize,
    pub mode: FinetuneMode,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<u64>>,
    pub metadata: RunMetadata,
}

impl MetricReport {
    pub fn new(task: Task, names: &[String], truth: &[usize], pred: &[usize], metadata: RunMetadata) -> Self {
        let conf = confusion(truth, pred, names.len());
        Self {
            task,
            accuracy: accuracy(&conf),
            macro_f1: macro_f1(&conf),
            per_class: per_class(&conf, names),
            confusion: conf,
            metadata,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub runs: usize,
}

impl Summary {
    pub fn of(reports: &[MetricReport]) -> Self {
        let acc: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
        let f1: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
        let (accuracy_mean, accuracy_std) = mean_std(&acc);
        let (macro_f1_mean, macro_f1_std) = mean_std(&f1);
        Self {
            accuracy_mean,
            accuracy_std,
            macro_f1_mean,
            macro_f1_std,
            runs: reports.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub runs: Vec<MetricReport>,
    pub summary: Summary,
}

/// What produces the representations the head is trained on.
#[derive(Debug, Clone)]
pub enum Backbone {
    /// A (typically pretrained) encoder.
    Encoder { cfg: EncoderConfig, params: ParamStore<f32> },
    /// Same architecture, freshly initialised for every repeat.
    Random { cfg: EncoderConfig },
    /// Router plus frozen experts; only `FROZEN` heads are supported.
    Moe {
        router: RouterParams,
        bank: ExpertBank,
        mode: RouteMode,
    },
}

impl Backbone {
    fn head_cfg(&self) -> &EncoderConfig {
        match self {
            Backbone::Encoder { cfg, .. } | Backbone::Random { cfg } => cfg,
            Backbone::Moe { bank, .. } => &bank.experts[0].cfg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub task: Task,
    pub n_per_class: usize,
    pub n_val: usize,
    pub n_test: Option<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub finetune: FinetuneConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            task: Task::Modulation,
            n_per_class: 16,
            n_val: 8,
            n_test: None,
            repeats: 5,
            seed: 0,
            finetune: FinetuneConfig::default(),
        }
    }
}

fn moe_features(router: &RouterParams, bank: &ExpertBank, mode: RouteMode, data: &[Spectrogram], idx: &[usize]) -> Result<Tensor<f32>> {
    let counter = EvalCounter::default();
    let mut out = Vec::new();
    for &i in idx {
        out.extend(moe_infer(&data[i], router, bank, mode, None, &counter)?.embedding);
    }
    Tensor::new(vec![idx.len(), bank.dim()], out)
}

fn pick(data: &[Spectrogram], idx: &[usize]) -> Vec<Spectrogram> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

/// One split-train-evaluate run per repeat, seeds derived from
/// `settings.seed`. `data` must be normalized.
pub fn run_task(backbone: &Backbone, data: &[Spectrogram], settings: &EvalSettings, config_hash: &str) -> Result<TaskReport> {
    let (names, labels) = settings.task.classes(data);
    let enc = backbone.head_cfg().clone();
    let mut runs = Vec::with_capacity(settings.repeats);
    for r in 0..settings.repeats {
        let run_seed = seed::derive(settings.seed, &[r as u64]);
        let plan = stratified_split(&labels, &names, settings.n_per_class, settings.n_val, settings.n_test, run_seed)?;
        let lab = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
        let (train_l, val_l, test_l) = (lab(&plan.train), lab(&plan.val), lab(&plan.test));
        let head = init_classifier(&enc, names.len(), run_seed)?;
        let ft = FinetuneConfig {
            seed: run_seed,
            ..settings.finetune.clone()
        };
        let (pred, epochs_run) = match backbone {
            Backbone::Moe { router, bank, mode } => {
                if ft.mode != FinetuneMode::Frozen {
                    return Err(Error::config("MoE evaluation trains frozen heads only"));
                }
                let f = |idx: &[usize]| moe_features(router, bank, *mode, data, idx);
                let (tf, vf, xf) = (f(&plan.train)?, f(&plan.val)?, f(&plan.test)?);
                let val = (!plan.val.is_empty()).then_some((&vf, &val_l[..]));
                let fit = fit_head(&enc, head, &tf, &train_l, val, &ft)?;
                (predict_head(&enc, &fit.params, &xf)?, fit.epochs_run)
            }
            Backbone::Encoder { .. } | Backbone::Random { .. } => {
                let mut params = match backbone {
                    Backbone::Encoder { params, .. } => params.clone(),
                    _ => init_backbone(&enc, run_seed)?,
                };
                if ft.mode == FinetuneMode::FineTune && params.get("dec.w1").is_err() {
                    params.extend(init_pretrain_heads(&enc, run_seed)?);
                }
                params.extend(head);
                let (train_d, val_d, test_d) = (pick(data, &plan.train), pick(data, &plan.val), pick(data, &plan.test));
                let val = (!val_d.is_empty()).then_some((&val_d[..], &val_l[..]));
                let out = finetune(&enc, params, &train_d, &train_l, val, &ft)?;
                let feats = encode_pooled(&enc, &out.params, &test_d, 32)?;
                (predict_head(&enc, &out.params.subset("cls."), &feats)?, out.epochs_run)
            }
        };
        runs.push(MetricReport::new(
            settings.task,
            &names,
            &test_l,
            &pred,
            RunMetadata {
                seed: run_seed,
                config_hash: config_hash.to_string(),
                n_per_class: settings.n_per_class,
                mode: ft.mode,
                epochs_run,
            },
        ));
    }
    Ok(TaskReport {
        summary: Summary::of(&runs),
        runs,
    })
}
