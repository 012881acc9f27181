//! Cross-module behaviour through the public API only.

use proptest::prelude::*;

use specfm::autodiff::{load_checkpoint, save_checkpoint, Checkpoint};
use specfm::baseband::{Modulation, Protocol};
use specfm::channel::MobilityKind;
use specfm::encoder::{init_model, patchify_raw, unpatchify, EncoderConfig};
use specfm::moe::{self, moe_infer, EvalCounter, Expert, ExpertBank, RouteMode, RouterConfig, RouterParams};
use specfm::objectives::{pretrain, PretrainConfig, Schedule};
use specfm::specgen::{generate_dataset, load_dataset, read_shard, Dataset, DatasetConfig};
use specfm::Error;

fn small_grid() -> DatasetConfig {
    DatasetConfig {
        protocols: vec![Protocol::WifiLike, Protocol::NrLike],
        modulations: vec![Modulation::Bpsk, Modulation::Qam16],
        snr_db: vec![10.0],
        mobilities: vec![MobilityKind::Static, MobilityKind::Vehicular],
        n_realizations: 2,
        master_seed: 12,
        shard_size: 5,
        ..DatasetConfig::default()
    }
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        patch: 8,
        depth: 1,
        dim: 16,
        heads: 2,
        ffn_mult: 2,
        max_tokens: 64,
        cls_channels: 4,
        ..EncoderConfig::default()
    }
}

#[test]
fn written_dataset_reloads_identically() {
    let cfg = small_grid();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.count, 16);
    assert_eq!(manifest.shards.len(), 4);
    let (m2, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(m2, manifest);
    let memory = Dataset::synthesize(&cfg).unwrap();
    assert_eq!(loaded.records.len(), memory.records.len());
    for (a, b) in loaded.records.iter().zip(&memory.records) {
        assert_eq!(a.data, b.data);
        // The shard label block stores the Doppler shift as f32.
        assert_eq!(a.label.doppler_hz, b.label.doppler_hz as f32 as f64);
        let mut b_label = b.label.clone();
        b_label.doppler_hz = a.label.doppler_hz;
        assert_eq!(a.label, b_label);
    }
    assert_eq!(loaded.stats, memory.stats);
    for s in &loaded.records {
        assert!(!s.normalized);
        assert!(s.data.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn truncated_shard_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&small_grid(), dir.path()).unwrap();
    let shard = dir.path().join(&manifest.shards[1].file);
    let bytes = std::fs::read(&shard).unwrap();
    std::fs::write(&shard, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(read_shard(&shard), Err(Error::TruncatedShard { .. })));
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn normalized_training_set_has_unit_statistics() {
    let ds = Dataset::synthesize(&small_grid()).unwrap();
    let all: Vec<f64> = ds.normalized(&ds.stats).iter().flat_map(|s| s.data.iter().map(|&v| v as f64)).collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-4, "{mean}");
    assert!((var - 1.0).abs() < 1e-3, "{var}");
}

#[test]
fn pretrained_checkpoint_round_trips_and_serves_as_expert() {
    let ds = Dataset::synthesize(&small_grid()).unwrap();
    let data = ds.normalized(&ds.stats);
    let enc = tiny_encoder();
    let cfg = PretrainConfig {
        schedule: Schedule {
            base_lr: 1e-3,
            warmup_epochs: 0.5,
            total_epochs: 2,
            floor_lr: 1e-8,
        },
        batch_size: 4,
        val_fraction: 0.25,
        ..PretrainConfig::default()
    };
    let out = pretrain(&enc, init_model(&enc, None, 2).unwrap(), &data, &cfg).unwrap();
    assert_eq!(out.val_curve().len(), out.epochs_run);
    assert!(out.val_curve().iter().all(|v| v.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let meta = serde_json::json!({ "encoder": enc });
    save_checkpoint(
        &path,
        &Checkpoint {
            meta,
            params: out.params.clone(),
        },
    )
    .unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.params.checksum(), out.params.checksum());
    assert_eq!(moe::checkpoint_encoder(&back).unwrap(), enc);

    let expert = Expert {
        cfg: enc.clone(),
        params: back.params,
    };
    let bank = ExpertBank::new(vec![expert.clone(), expert.clone(), expert.clone()]).unwrap();
    let router = RouterParams::init(
        &RouterConfig {
            dim: 8,
            heads: 2,
            depth: 1,
            ffn_mult: 2,
        },
        &enc,
        4,
    )
    .unwrap();
    let counter = EvalCounter::default();
    for s in data.iter().take(4) {
        // Identical experts make every aggregation equal the single expert.
        let top = moe_infer(s, &router, &bank, RouteMode::Top1, None, &counter).unwrap();
        let dense = moe_infer(s, &router, &bank, RouteMode::Dense, None, &counter).unwrap();
        let alone = expert.embed(s).unwrap();
        assert_eq!(top.embedding, alone);
        for (a, b) in dense.embedding.iter().zip(&alone) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }
    assert_eq!(counter.router.get(), 8);
    assert_eq!(counter.experts.get(), 4 + 12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_inverts(rows in 1usize..5, cols in 1usize..5, patch in 1usize..5, seed in any::<u64>()) {
        let (frames, bins) = (rows * patch, cols * patch);
        let data: Vec<f32> = (0..frames * bins).map(|i| (seed.wrapping_add(i as u64) % 1000) as f32).collect();
        let grid = patchify_raw(&data, frames, bins, patch).unwrap();
        prop_assert_eq!(grid.n_tokens(), rows * cols);
        prop_assert_eq!(unpatchify(&grid), data);
    }

    #[test]
    fn patchify_rejects_ragged_grids(frames in 1usize..40, bins in 1usize..40, patch in 2usize..6) {
        prop_assume!(frames % patch != 0 || bins % patch != 0);
        let data = vec![0.0f32; frames * bins];
        prop_assert!(matches!(patchify_raw(&data, frames, bins, patch), Err(Error::Shape(_))));
    }
}
