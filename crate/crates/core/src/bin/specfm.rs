use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use specfm::autodiff::{load_checkpoint, save_checkpoint, Checkpoint, ParamStore};
use specfm::config::RunConfig;
use specfm::encoder::{init_model, EncoderConfig};
use specfm::eval::{self, Backbone, Task};
use specfm::moe::{self, Expert, ExpertBank, RouteMode};
use specfm::objectives::{self, write_curve_csv};
use specfm::specgen::{generate_dataset, load_dataset, NormStats, Spectrogram};

#[derive(Parser, Debug)]
#[command(name = "specfm", version, about = "Spectrogram foundation model toolkit")]
struct Cli {
    /// Run configuration (JSON). Absent fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; for `generate` it replaces the dataset master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset into shards plus a manifest.
    Generate,
    /// Masked-modeling pretraining.
    Pretrain(DataArgs),
    /// Train a task head (and optionally the encoder) on one split.
    Finetune(FinetuneArgs),
    /// Train the gating network over three frozen protocol experts.
    TrainRouter(RouterArgs),
    /// Few-shot evaluation with repeats.
    Eval(EvalArgs),
    /// Write pooled embeddings as TSV.
    ExportEmbeddings(ModelArgs),
    /// Render one spectrogram to a PGM image.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    /// Encoder checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Modulation,
    SnrDoppler,
    Multiprotocol,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Modulation => Task::Modulation,
            TaskArg::SnrDoppler => Task::SnrDoppler,
            TaskArg::Multiprotocol => Task::Multiprotocol,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Frozen,
    FineTune,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
struct RouterArgs {
    #[arg(long)]
    data: PathBuf,
    /// Expert checkpoints in the order WIFI_LIKE LTE_LIKE NR_LIKE.
    #[arg(long, num_args = 3, required = true)]
    experts: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Encoder checkpoint; without it (and without `--bundle`) a randomly
    /// initialised encoder is evaluated.
    #[arg(long, conflicts_with = "bundle")]
    checkpoint: Option<PathBuf>,
    /// MoE bundle directory written by `train-router`.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    /// Record index within the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Normalize with the dataset statistics before rendering.
    #[arg(long)]
    normalized: bool,
}

/// Failure that should end the process with a specific exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Exit(2, format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(|e| Exit(2, format!("invalid config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    Ok(cfg.resolve(seed)?)
}

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'a str,
    content_hash: String,
    config: &'a RunConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn encoder_meta(cfg: &EncoderConfig, stats: &NormStats, hash: &str, role: &str) -> serde_json::Value {
    serde_json::json!({ "role": role, "encoder": cfg, "norm_stats": stats, "config_hash": hash })
}

struct Model {
    cfg: EncoderConfig,
    params: ParamStore<f32>,
    stats: Option<NormStats>,
}

fn load_model(path: &Path) -> Result<Model> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = moe::checkpoint_encoder(&ckpt)?;
    let stats = ckpt.meta.get("norm_stats").map(|v| serde_json::from_value(v.clone())).transpose()?;
    Ok(Model {
        cfg,
        params: ckpt.params,
        stats,
    })
}

/// Load a dataset and normalize it with `stats`, or its own statistics.
fn load_normalized(dir: &Path, stats: Option<NormStats>) -> Result<(Vec<Spectrogram>, NormStats)> {
    let (_, ds) = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let stats = stats.unwrap_or(ds.stats);
    Ok((ds.normalized(&stats), stats))
}

fn apply_mode(cfg: &mut RunConfig, mode: Option<ModeArg>) {
    if let Some(m) = mode {
        cfg.finetune.mode = match m {
            ModeArg::Frozen => objectives::FinetuneMode::Frozen,
            ModeArg::FineTune => objectives::FinetuneMode::FineTune,
        };
        cfg.eval.finetune.mode = cfg.finetune.mode;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = &cli.out;
    let name = match &cli.command {
        Command::Generate => "generate",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::TrainRouter(_) => "train-router",
        Command::Eval(_) => "eval",
        Command::ExportEmbeddings(_) => "export-embeddings",
        Command::Render(_) => "render",
    };
    match &cli.command {
        Command::Generate => {
            if let Some(s) = cli.seed {
                cfg.dataset.master_seed = s;
            }
        }
        Command::Finetune(a) => {
            cfg.eval.task = a.task.map_or(cfg.eval.task, Task::from);
            cfg.eval.n_per_class = a.n_per_class.unwrap_or(cfg.eval.n_per_class);
            apply_mode(&mut cfg, a.mode);
        }
        Command::Eval(a) => {
            cfg.eval.task = a.task.map_or(cfg.eval.task, Task::from);
            cfg.eval.n_per_class = a.n_per_class.unwrap_or(cfg.eval.n_per_class);
            cfg.eval.repeats = a.repeats.unwrap_or(cfg.eval.repeats);
            apply_mode(&mut cfg, a.mode);
        }
        _ => {}
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let hash = cfg.hash()?;
    write_json(
        &out.join("resolved_config.json"),
        &Resolved {
            command: name,
            content_hash: hash.clone(),
            config: &cfg,
        },
    )?;

    match cli.command {
        Command::Generate => {
            let m = generate_dataset(&cfg.dataset, out)?;
            println!("generated {} spectrograms in {} shards ({})", m.count, m.shards.len(), out.display());
        }
        Command::Pretrain(a) => {
            let (data, stats) = load_normalized(&a.data, None)?;
            let params = init_model(&cfg.encoder, None, cfg.seed)?;
            let res = objectives::pretrain(&cfg.encoder, params, &data, &cfg.pretrain)?;
            write_curve_csv(&out.join("curve.csv"), &res.curve)?;
            save_checkpoint(
                &out.join("model.ckpt"),
                &Checkpoint {
                    meta: encoder_meta(&cfg.encoder, &stats, &hash, "pretrained"),
                    params: res.params,
                },
            )?;
            println!(
                "pretrained {} epochs, best val L_recon {:.6} at epoch {}",
                res.epochs_run, res.best_val, res.best_epoch
            );
        }
        Command::Finetune(a) => {
            let model = load_model(&a.checkpoint)?;
            let (data, stats) = load_normalized(&a.data, model.stats)?;
            let (names, labels) = cfg.eval.task.classes(&data);
            let plan = eval::stratified_split(
                &labels,
                &names,
                cfg.eval.n_per_class,
                cfg.eval.n_val,
                cfg.eval.n_test,
                cfg.seed,
            )?;
            let pick = |idx: &[usize]| -> (Vec<Spectrogram>, Vec<usize>) {
                (idx.iter().map(|&i| data[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
            };
            let ((td, tl), (vd, vl), (xd, xl)) = (pick(&plan.train), pick(&plan.val), pick(&plan.test));
            let mut params = model.params;
            params.extend(specfm::encoder::init_classifier(&model.cfg, names.len(), cfg.seed)?);
            if params.get("dec.w1").is_err() {
                params.extend(specfm::encoder::init_pretrain_heads(&model.cfg, cfg.seed)?);
            }
            let val = (!vd.is_empty()).then_some((&vd[..], &vl[..]));
            let res = objectives::finetune(&model.cfg, params, &td, &tl, val, &cfg.finetune)?;
            write_curve_csv(&out.join("curve.csv"), &res.curve)?;
            let feats = objectives::encode_pooled(&model.cfg, &res.params, &xd, 32)?;
            let pred = objectives::predict_head(&model.cfg, &res.params.subset("cls."), &feats)?;
            let report = eval::MetricReport::new(
                cfg.eval.task,
                &names,
                &xl,
                &pred,
                eval::RunMetadata {
                    seed: cfg.seed,
                    config_hash: hash.clone(),
                    n_per_class: cfg.eval.n_per_class,
                    mode: cfg.finetune.mode,
                    epochs_run: res.epochs_run,
                },
            );
            write_json(&out.join("report.json"), &report)?;
            save_checkpoint(
                &out.join("finetuned.ckpt"),
                &Checkpoint {
                    meta: encoder_meta(&model.cfg, &stats, &hash, "finetuned"),
                    params: res.params,
                },
            )?;
            println!("test accuracy {:.4}, macro-F1 {:.4}", report.accuracy, report.macro_f1);
        }
        Command::TrainRouter(a) => {
            let mut experts = Vec::new();
            let mut stats = None;
            for p in &a.experts {
                let m = load_model(p)?;
                stats = stats.or(m.stats);
                experts.push(Expert {
                    cfg: m.cfg,
                    params: m.params,
                });
            }
            let bank = ExpertBank::new(experts)?;
            let before = bank.checksum();
            let (data, stats) = load_normalized(&a.data, stats)?;
            let res = moe::train_router(&bank, &data, &cfg.router)?;
            for w in &res.warnings {
                eprintln!("warning: {w}");
            }
            if bank.checksum() != before {
                bail!("expert parameters changed during router training");
            }
            write_curve_csv(&out.join("curve.csv"), &res.curve)?;
            moe::save_bundle(out, &res.router, &bank, RouteMode::Top1, Some(stats))?;
            let acc = moe::routing_accuracy(&res.router, &data, 32)?;
            println!("router training accuracy {acc:.4}; bundle in {}", out.display());
        }
        Command::Eval(a) => {
            let (backbone, stats) = match (&a.checkpoint, &a.bundle) {
                (Some(c), _) => {
                    let m = load_model(c)?;
                    (
                        Backbone::Encoder {
                            cfg: m.cfg,
                            params: m.params,
                        },
                        m.stats,
                    )
                }
                (None, Some(b)) => {
                    let (manifest, router, bank) = moe::load_bundle(b)?;
                    (
                        Backbone::Moe {
                            router,
                            bank,
                            mode: manifest.mode_default,
                        },
                        manifest.norm_stats,
                    )
                }
                (None, None) => (
                    Backbone::Random {
                        cfg: cfg.encoder.clone(),
                    },
                    None,
                ),
            };
            let (data, _) = load_normalized(&a.data, stats)?;
            let report = eval::run_task(&backbone, &data, &cfg.eval, &hash)?;
            write_json(&out.join("report.json"), &report)?;
            let s = &report.summary;
            println!(
                "{:?} n/class {}: accuracy {:.2} ± {:.2}, macro-F1 {:.2} ± {:.2} over {} runs",
                cfg.eval.task,
                cfg.eval.n_per_class,
                100.0 * s.accuracy_mean,
                100.0 * s.accuracy_std,
                100.0 * s.macro_f1_mean,
                100.0 * s.macro_f1_std,
                s.runs
            );
        }
        Command::ExportEmbeddings(a) => {
            let m = load_model(&a.checkpoint)?;
            let (data, _) = load_normalized(&a.data, m.stats)?;
            let path = out.join("embeddings.tsv");
            let n = eval::export_embeddings(&m.cfg, &m.params, &data, &path)?;
            println!("wrote {n} embeddings to {}", path.display());
        }
        Command::Render(a) => {
            let (_, ds) = load_dataset(&a.data)?;
            let Some(rec) = ds.records.get(a.index) else {
                return Err(Exit(2, format!("index {} out of range ({} records)", a.index, ds.len())).into());
            };
            let s = if a.normalized { ds.normalized(&ds.stats).swap_remove(a.index) } else { rec.clone() };
            let path = out.join(format!("spectrogram_{:05}.pgm", a.index));
            eval::render(&s, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Exit>() {
                Some(Exit(code, _)) => ExitCode::from(*code),
                None => ExitCode::FAILURE,
            }
        }
    }
}
