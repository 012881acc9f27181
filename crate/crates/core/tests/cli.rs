use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "dataset": { "n_realizations": 1, "shard_size": 32 },
  "encoder": { "patch": 8, "depth": 1, "dim": 16, "heads": 2, "ffn_mult": 2, "max_tokens": 64, "cls_channels": 4 },
  "pretrain": { "schedule": { "base_lr": 0.001, "warmup_epochs": 0.5, "total_epochs": 2 } },
  "finetune": { "schedule": { "base_lr": 0.001, "warmup_epochs": 0.5, "total_epochs": 3 } },
  "router": {
    "router": { "dim": 8, "heads": 2, "depth": 1, "ffn_mult": 2 },
    "schedule": { "base_lr": 0.003, "warmup_epochs": 0.5, "total_epochs": 2 }
  },
  "eval": { "n_per_class": 2, "n_val": 2, "repeats": 2 }
}"#;

fn specfm(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_specfm"));
    cmd.args(args).arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("spawn specfm")
}

fn ok(args: &[&str], config: &Path, out: &Path) -> String {
    let o = specfm(args, Some(config), out);
    assert!(
        o.status.success(),
        "specfm {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_on_a_tiny_config() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let p = |s: &str| root.join(s);
    let s = |s: &str| root.join(s).to_str().unwrap().to_string();

    let msg = ok(&["generate", "--seed", "5"], &cfg, &p("data"));
    assert!(msg.contains("generated 60 spectrograms"), "{msg}");
    let manifest = json(&p("data/manifest.json"));
    assert_eq!(manifest["count"], 60);
    let resolved = json(&p("data/resolved_config.json"));
    assert_eq!(resolved["command"], "generate");
    assert_eq!(resolved["config"]["dataset"]["master_seed"], 5);
    assert_eq!(resolved["content_hash"].as_str().unwrap().len(), 64);

    ok(&["pretrain", "--data", &s("data")], &cfg, &p("pre"));
    assert!(p("pre/model.ckpt").exists());
    let curve = std::fs::read_to_string(p("pre/curve.csv")).unwrap();
    assert!(curve.lines().count() >= 3, "{curve}");

    let msg = ok(
        &["eval", "--data", &s("data"), "--checkpoint", &s("pre/model.ckpt"), "--task", "modulation"],
        &cfg,
        &p("eval"),
    );
    assert!(msg.contains("macro-F1"), "{msg}");
    let report = json(&p("eval/report.json"));
    assert_eq!(report["summary"]["runs"], 2);
    let run = &report["runs"][0];
    assert_eq!(run["task"], "MODULATION");
    assert_eq!(run["metadata"]["n_per_class"], 2);
    assert_eq!(run["per_class"].as_array().unwrap().len(), 5);
    // 12 records per modulation, 2 train and 2 val each.
    let tested: u64 = run["confusion"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .sum();
    assert_eq!(tested, 5 * 8);

    ok(
        &["finetune", "--data", &s("data"), "--checkpoint", &s("pre/model.ckpt"), "--task", "multiprotocol", "--mode", "fine-tune"],
        &cfg,
        &p("ft"),
    );
    assert!(p("ft/finetuned.ckpt").exists());
    assert_eq!(json(&p("ft/report.json"))["metadata"]["mode"], "fine_tune");

    ok(&["export-embeddings", "--data", &s("data"), "--checkpoint", &s("pre/model.ckpt")], &cfg, &p("emb"));
    let tsv = std::fs::read_to_string(p("emb/embeddings.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 61);
    assert_eq!(tsv.lines().next().unwrap().split('\t').count(), 7 + 16);

    ok(&["render", "--data", &s("data"), "--index", "3"], &cfg, &p("img"));
    let pgm = std::fs::read(p("img/spectrogram_00003.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    assert_eq!(pgm.len(), 13 + 64 * 64);

    let ckpt = s("pre/model.ckpt");
    ok(&["train-router", "--data", &s("data"), "--experts", &ckpt, &ckpt, &ckpt], &cfg, &p("moe"));
    let bundle = json(&p("moe/moe.json"));
    assert_eq!(bundle["expert_order"], serde_json::json!(["WIFI_LIKE", "LTE_LIKE", "NR_LIKE"]));
    assert!(bundle["norm_stats"].is_object());

    ok(&["eval", "--data", &s("data"), "--bundle", &s("moe"), "--repeats", "1"], &cfg, &p("eval_moe"));
    assert_eq!(json(&p("eval_moe/report.json"))["summary"]["runs"], 1);
}

#[test]
fn missing_config_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = specfm(&["generate"], Some(&tmp.path().join("absent.json")), &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.json"));
}

#[test]
fn malformed_config_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{ \"dataset\": { \"n_realizations\": \"many\" } }").unwrap();
    let o = specfm(&["generate"], Some(&cfg), &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = specfm(&["distill"], None, tmp.path());
    assert!(!o.status.success());
}

#[test]
fn missing_dataset_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = specfm(&["pretrain", "--data", "/nonexistent/dataset"], None, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/dataset"));
}
