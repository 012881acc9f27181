use rand::Rng;

use super::*;
use crate::specgen::SpectrogramLabel;

fn tiny_cfg() -> EncoderConfig {
    EncoderConfig {
        patch: 4,
        depth: 1,
        dim: 8,
        heads: 2,
        ffn_mult: 2,
        max_tokens: 16,
        ..EncoderConfig::default()
    }
}

fn tiny_router() -> RouterConfig {
    RouterConfig {
        dim: 8,
        heads: 2,
        depth: 1,
        ffn_mult: 2,
    }
}

/// 16x16 spectrogram whose energy sits in a protocol-dependent band.
fn spec(protocol: Protocol, seed: u64) -> Spectrogram {
    let mut rng = crate::seed::rng(seed);
    let band = protocol.index() * 5;
    let data = (0..256)
        .map(|q| {
            let k = q % 16;
            let base = if (band..band + 5).contains(&k) { 2.0 } else { -1.0 };
            base + rng.random_range(-0.3f32..0.3)
        })
        .collect();
    Spectrogram {
        frames: 16,
        bins: 16,
        channels: 1,
        data,
        label: SpectrogramLabel {
            protocol,
            ..SpectrogramLabel::default()
        },
        normalized: true,
    }
}

fn biased_router(bias: [f32; 3]) -> RouterParams {
    let mut r = RouterParams::init(&tiny_router(), &tiny_cfg(), 5).unwrap();
    r.params.get_mut("router.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    r.params.get_mut("router.b").unwrap().data.copy_from_slice(&bias);
    r
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax_lowest(&[0.4, 0.4, 0.2]), 0);
    assert_eq!(argmax_lowest(&[0.2, 0.4, 0.4]), 1);
    assert_eq!(argmax_lowest(&[1.0 / 3.0; 3]), 0);
    assert_eq!(argmax_lowest(&[0.1, 0.2, 0.7]), 2);
}

#[test]
fn router_weights_are_a_distribution() {
    let r = RouterParams::init(&tiny_router(), &tiny_cfg(), 1).unwrap();
    for p in Protocol::ALL {
        let d = route(&spec(p, 3), &r).unwrap();
        let s: f64 = d.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(d.weights.iter().all(|&w| w > 0.0));
        assert_eq!(d.chosen, argmax_lowest(&d.weights));
    }
}

#[test]
fn top1_matches_standalone_expert_bitwise() {
    let bank = ExpertBank::init(&tiny_cfg(), 11).unwrap();
    for k in 0..3 {
        let mut bias = [0.0f32; 3];
        bias[k] = 5.0;
        let r = biased_router(bias);
        let s = spec(Protocol::ALL[(k + 1) % 3], 20 + k as u64);
        let counter = EvalCounter::default();
        let out = moe_infer(&s, &r, &bank, RouteMode::Top1, None, &counter).unwrap();
        assert_eq!(out.decision.chosen, k);
        let alone = bank.experts[k].embed(&s).unwrap();
        assert_eq!(
            out.embedding.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            alone.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(out.expert_evals, 1);
        assert_eq!(counter.experts.get(), 1);
    }
}

#[test]
fn dense_with_one_hot_gate_equals_top1() {
    let bank = ExpertBank::init(&tiny_cfg(), 2).unwrap();
    let r = biased_router([0.0, 1000.0, 0.0]);
    let s = spec(Protocol::NrLike, 4);
    let c = EvalCounter::default();
    let dense = moe_infer(&s, &r, &bank, RouteMode::Dense, None, &c).unwrap();
    let top = moe_infer(&s, &r, &bank, RouteMode::Top1, None, &c).unwrap();
    assert!((dense.decision.weights[1] - 1.0).abs() <= 1e-12);
    assert_eq!(dense.expert_evals, 3);
    assert_eq!(c.experts.get(), 4);
    let worst = dense
        .embedding
        .iter()
        .zip(&top.embedding)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn aggregate_requires_outputs() {
    let d = RouteDecision::from_weights([0.2, 0.5, 0.3]);
    let only_one = vec![None, Some(vec![1.0, 2.0]), None];
    assert_eq!(aggregate(&d, &only_one, RouteMode::Top1).unwrap(), vec![1.0, 2.0]);
    assert!(matches!(
        aggregate(&d, &only_one, RouteMode::Dense),
        Err(Error::MissingExpertOutput(0))
    ));
    let missing_chosen = vec![Some(vec![1.0]), None, Some(vec![1.0])];
    assert!(matches!(
        aggregate(&d, &missing_chosen, RouteMode::Top1),
        Err(Error::MissingExpertOutput(1))
    ));
    let all = vec![Some(vec![1.0f32]), Some(vec![2.0]), Some(vec![4.0])];
    let h = aggregate(&d, &all, RouteMode::Dense).unwrap();
    assert!((h[0] - (0.2 + 1.0 + 1.2)).abs() < 1e-6);
}

#[test]
fn router_training_leaves_experts_alone_and_learns() {
    let bank = ExpertBank::init(&tiny_cfg(), 7).unwrap();
    let before = bank.checksum();
    let data: Vec<Spectrogram> = (0..24).map(|i| spec(Protocol::ALL[i % 3], 100 + i as u64)).collect();
    let cfg = RouterTrainConfig {
        router: tiny_router(),
        schedule: Schedule {
            base_lr: 1e-2,
            warmup_epochs: 1.0,
            total_epochs: 12,
            floor_lr: 1e-5,
        },
        batch_size: 8,
        seed: 3,
        ..RouterTrainConfig::default()
    };
    let out = train_router(&bank, &data, &cfg).unwrap();
    assert_eq!(bank.checksum(), before);
    assert!(out.warnings.is_empty());
    let first = out.curve[0].l_cls.unwrap();
    let last = out.curve.last().unwrap().l_cls.unwrap();
    assert!(last < first, "{first} -> {last}");
    assert!(routing_accuracy(&out.router, &data, 8).unwrap() > 0.9);
}

#[test]
fn unbalanced_router_data_warns() {
    let bank = ExpertBank::init(&tiny_cfg(), 7).unwrap();
    let data: Vec<Spectrogram> = (0..6).map(|i| spec(Protocol::ALL[usize::from(i >= 4)], i)).collect();
    let cfg = RouterTrainConfig {
        router: tiny_router(),
        schedule: Schedule {
            total_epochs: 2,
            warmup_epochs: 0.0,
            ..Schedule::default()
        },
        ..RouterTrainConfig::default()
    };
    let out = train_router(&bank, &data, &cfg).unwrap();
    assert_eq!(out.warnings.len(), 1);
}

#[test]
fn bundle_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let bank = ExpertBank::init(&tiny_cfg(), 9).unwrap();
    let router = RouterParams::init(&tiny_router(), &tiny_cfg(), 9).unwrap();
    let m = save_bundle(dir.path(), &router, &bank, RouteMode::Top1, None).unwrap();
    let (m2, r2, b2) = load_bundle(dir.path()).unwrap();
    assert_eq!(m, m2);
    assert_eq!(r2.cfg, router.cfg);
    assert_eq!(r2.params.checksum(), router.params.checksum());
    assert_eq!(b2.checksum(), bank.checksum());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(BUNDLE_FILE)).unwrap()).unwrap();
    assert_eq!(json["expert_order"], serde_json::json!(["WIFI_LIKE", "LTE_LIKE", "NR_LIKE"]));
    assert_eq!(json["mode_default"], "top1");
}

#[test]
fn bank_rejects_wrong_size() {
    let bank = ExpertBank::init(&tiny_cfg(), 1).unwrap();
    assert!(ExpertBank::new(bank.experts[..2].to_vec()).is_err());
}

#[test]
fn dense_convex_combination_example() {
    let d = RouteDecision::from_weights([0.5, 0.5, 0.0]);
    let outs = vec![Some(vec![2.0f32, 0.0]), Some(vec![0.0, 2.0]), Some(vec![9.0, 9.0])];
    assert_eq!(aggregate(&d, &outs, RouteMode::Dense).unwrap(), vec![1.0, 1.0]);
    let top = RouteDecision::from_weights([0.2, 0.5, 0.3]);
    assert_eq!(aggregate(&top, &outs, RouteMode::Top1).unwrap(), vec![0.0, 2.0]);
}

#[test]
fn uniform_router_loss_is_ln3() {
    let r = biased_router([0.0; 3]);
    let data: Vec<Spectrogram> = (0..6).map(|i| spec(Protocol::ALL[i % 3], i as u64)).collect();
    let refs: Vec<&Spectrogram> = data.iter().collect();
    let mut tape = Tape::<f64>::new();
    let p = r.params.cast::<f64>().bind(&mut tape, |_| false);
    let x = patchify_batch::<f64>(&refs, 4).unwrap();
    let logits = router_logits(&mut tape, &r.cfg, &p, x, 6).unwrap();
    let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let ce = loss_ce(&mut tape, logits, &labels).unwrap();
    assert!((tape.value(ce).item() - 3f64.ln()).abs() < 1e-12);
    let d = route(&data[0], &r).unwrap();
    assert!(d.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-12));
    assert_eq!(d.chosen, 0);
}
