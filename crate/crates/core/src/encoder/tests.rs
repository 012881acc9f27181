use rand::Rng;

use super::*;
use crate::autodiff::{grad_check, Bound};

fn tiny_cfg() -> EncoderConfig {
    EncoderConfig {
        patch: 4,
        depth: 2,
        dim: 8,
        heads: 2,
        ffn_mult: 2,
        max_tokens: 16,
        cls_channels: 4,
        ..EncoderConfig::default()
    }
}

fn bind64(store: &ParamStore<f32>, tape: &mut Tape<f64>) -> Bound {
    store.cast::<f64>().bind(tape, |_| true)
}

fn random_patches(rows: usize, plen: usize, seed: u64) -> Tensor<f64> {
    let mut rng = crate::seed::rng(seed);
    Tensor::from_fn(&[rows, plen], |_| rng.random_range(-1.0..1.0))
}

fn random_grid(frames: usize, bins: usize, seed: u64) -> Vec<f32> {
    let mut rng = crate::seed::rng(seed);
    (0..frames * bins).map(|_| rng.random_range(-3.0f32..3.0)).collect()
}

#[test]
fn patch_counts() {
    assert_eq!(patchify_raw(&vec![0.0; 128 * 128], 128, 128, 4).unwrap().n_tokens(), 1024);
    assert_eq!(patchify_raw(&[0.0; 64], 8, 8, 4).unwrap().n_tokens(), 4);
    assert!(matches!(patchify_raw(&[0.0; 60], 6, 10, 4), Err(Error::Shape(_))));
}

#[test]
fn patch_order_is_time_major() {
    let data: Vec<f32> = (0..64).map(|v| v as f32).collect();
    let g = patchify_raw(&data, 8, 8, 4).unwrap();
    // Token 1 is time rows 0..4, bins 4..8.
    assert_eq!(&g.token(1)[..4], &[4.0, 5.0, 6.0, 7.0]);
    assert_eq!(&g.token(1)[4..8], &[12.0, 13.0, 14.0, 15.0]);
    assert_eq!(g.token(2)[0], 32.0);
}

#[test]
fn unpatchify_inverts_patchify() {
    for seed in 0..10 {
        let data = random_grid(16, 12, seed);
        let g = patchify_raw(&data, 16, 12, 4).unwrap();
        assert_eq!(unpatchify(&g), data);
    }
}

#[test]
fn embedding_is_affine() {
    let cfg = tiny_cfg();
    let mut store = init_backbone(&cfg, 1).unwrap();
    store.insert("emb.b", Tensor::zeros(&[cfg.dim]));
    let mut tape = Tape::new();
    let p = bind64(&store, &mut tape);
    let zero = tape.constant(Tensor::zeros(&[1, 16]));
    let x0 = embed_tokens(&mut tape, &p, zero).unwrap();
    assert!(tape.value(x0).data.iter().all(|&v| v == 0.0));

    let a = random_patches(1, 16, 2);
    let b = random_patches(1, 16, 3);
    let sum = Tensor::new(vec![1, 16], a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect()).unwrap();
    let ea = tape.constant(a);
    let eb = tape.constant(b);
    let es = tape.constant(sum);
    let xa = embed_tokens(&mut tape, &p, ea).unwrap();
    let xb = embed_tokens(&mut tape, &p, eb).unwrap();
    let xs = embed_tokens(&mut tape, &p, es).unwrap();
    for j in 0..cfg.dim {
        let lhs = tape.value(xs).data[j];
        let rhs = tape.value(xa).data[j] + tape.value(xb).data[j];
        assert!((lhs - rhs).abs() < 1e-12);
    }
    assert_eq!(tape.shape(xs), [1, cfg.dim]);
}

#[test]
fn positions_add_and_bound_length() {
    let cfg = tiny_cfg();
    let mut store = init_backbone(&cfg, 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(random_patches(8, cfg.dim, 4));
    let p = bind64(&store, &mut tape);
    let z = add_positions(&mut tape, &p, x, 2).unwrap();
    let pos = store.get("pos").unwrap().cast::<f64>();
    for r in 0..8 {
        for j in 0..cfg.dim {
            let want = tape.value(x).data[r * cfg.dim + j] + pos.data[(r % 4) * cfg.dim + j];
            assert_eq!(tape.value(z).data[r * cfg.dim + j], want);
        }
    }
    store.insert("pos", Tensor::zeros(&[cfg.max_tokens, cfg.dim]));
    let p0 = bind64(&store, &mut tape);
    let z0 = add_positions(&mut tape, &p0, x, 1).unwrap();
    assert_eq!(tape.value(z0), tape.value(x));

    let long = tape.constant(Tensor::zeros(&[17, cfg.dim]));
    assert!(matches!(
        add_positions(&mut tape, &p, long, 1),
        Err(Error::SequenceTooLong { len: 17, max: 16 })
    ));
}

#[test]
fn mask_cardinality_and_determinism() {
    assert_eq!(sample_mask(1024, 0.7, 0).unwrap().len(), 716);
    assert!(sample_mask(100, 0.0, 0).unwrap().is_empty());
    for n in [1usize, 3, 4, 17, 256] {
        for rho in [0.0, 0.1, 0.5, 0.7, 0.99] {
            let m = sample_mask(n, rho, 9).unwrap();
            assert_eq!(m.len(), (rho * n as f64).floor() as usize);
            assert!(m.indices.windows(2).all(|w| w[0] < w[1]));
            assert!(m.indices.iter().all(|&i| i < n));
        }
    }
    assert_eq!(sample_mask(256, 0.7, 5).unwrap(), sample_mask(256, 0.7, 5).unwrap());
    assert_ne!(sample_mask(256, 0.7, 5).unwrap(), sample_mask(256, 0.7, 6).unwrap());
    assert!(sample_mask(4, 1.0, 0).is_err());
}

#[test]
fn apply_mask_replaces_only_masked_rows() {
    let cfg = tiny_cfg();
    let store = init_backbone(&cfg, 1).unwrap();
    let mut tape = Tape::new();
    let p = bind64(&store, &mut tape);
    let x = tape.constant(random_patches(8, cfg.dim, 5));
    let token = store.get("mask_token").unwrap().cast::<f64>();

    let same = apply_mask(&mut tape, &p, x, &[MaskSpec::empty(8)]).unwrap();
    assert_eq!(tape.value(same), tape.value(x));

    let m = MaskSpec {
        indices: vec![1, 5, 6],
        n_tokens: 8,
        ratio: 0.375,
        seed: 0,
    };
    let y = apply_mask(&mut tape, &p, x, &[m]).unwrap();
    for r in 0..8 {
        let got = tape.value(y).row(r);
        if [1, 5, 6].contains(&r) {
            assert_eq!(got, &token.data[..]);
        } else {
            assert_eq!(got, tape.value(x).row(r));
        }
    }

    let full = MaskSpec {
        indices: (0..8).collect(),
        n_tokens: 8,
        ratio: 0.0,
        seed: 0,
    };
    let y = apply_mask(&mut tape, &p, x, &[full]).unwrap();
    assert!((0..8).all(|r| tape.value(y).row(r) == &token.data[..]));

    let bad = MaskSpec {
        indices: vec![8],
        n_tokens: 8,
        ratio: 0.0,
        seed: 0,
    };
    assert!(matches!(apply_mask(&mut tape, &p, x, &[bad]), Err(Error::Index { index: 8, len: 8 })));
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = tiny_cfg();
    let store = init_backbone(&cfg, 2).unwrap();
    let mut tape = Tape::new();
    let p = bind64(&store, &mut tape);
    let z0 = tape.constant(random_patches(10, cfg.dim, 6));
    let mut trace = Vec::new();
    encoder_forward(&mut tape, &cfg, &p, z0, 2, Some(&mut trace)).unwrap();
    assert_eq!(trace.len(), cfg.depth * 2 * cfg.heads);
    for rec in &trace {
        let a = tape.value(rec.probs);
        assert_eq!(a.shape, vec![5, 5]);
        for r in 0..5 {
            let s: f64 = a.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn single_token_attention_returns_value_row() {
    let cfg = EncoderConfig {
        depth: 1,
        ..tiny_cfg()
    };
    let store = init_backbone(&cfg, 3).unwrap();
    let mut tape = Tape::new();
    let p = bind64(&store, &mut tape);
    let z = tape.constant(random_patches(1, cfg.dim, 7));
    let mut trace = Vec::new();
    encoder_forward(&mut tape, &cfg, &p, z, 1, Some(&mut trace)).unwrap();
    for rec in &trace {
        assert_eq!(tape.value(rec.probs).data, vec![1.0]);
    }
    // softmax over one key is exactly 1, so the head output equals V.
    let v = tape.matmul(z, p.get("layer0.wv").unwrap()).unwrap();
    let wv = tape.value(v).clone();
    let mut one = Tape::new();
    let pz = bind64(&store, &mut one);
    let zz = one.constant(tape.value(z).clone());
    let q = one.matmul(zz, pz.get("layer0.wq").unwrap()).unwrap();
    let k = one.matmul(zz, pz.get("layer0.wk").unwrap()).unwrap();
    let kt = one.transpose(k).unwrap();
    let s = one.matmul(q, kt).unwrap();
    let a = one.softmax(s).unwrap();
    let vv = one.matmul(zz, pz.get("layer0.wv").unwrap()).unwrap();
    let o = one.matmul(a, vv).unwrap();
    assert_eq!(one.value(o), &wv);
}

#[test]
fn transformer_core_is_permutation_equivariant() {
    let cfg = tiny_cfg();
    let store = init_backbone(&cfg, 4).unwrap();
    let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
    let x = random_patches(8, cfg.dim, 8);
    let xp = Tensor::new(vec![8, cfg.dim], perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();

    let mut tape = Tape::new();
    let p = bind64(&store, &mut tape);
    let a = tape.constant(x);
    let b = tape.constant(xp);
    let za = encoder_forward(&mut tape, &cfg, &p, a, 1, None).unwrap();
    let zb = encoder_forward(&mut tape, &cfg, &p, b, 1, None).unwrap();
    for (r, &src) in perm.iter().enumerate() {
        for (u, v) in tape.value(zb).row(r).iter().zip(tape.value(za).row(src)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_emits_one_row_per_masked_token() {
    let cfg = tiny_cfg();
    let store = init_model(&cfg, None, 1).unwrap();
    let mut tape = Tape::new();
    let p = bind64(&store, &mut tape);
    let masks = vec![sample_mask(4, 0.7, 1).unwrap(), sample_mask(4, 0.5, 2).unwrap()];
    let fwd = forward(&mut tape, &cfg, &p, random_patches(8, 16, 1), 2, &masks).unwrap();
    let rec = decode_masked(&mut tape, &p, fwd.tokens, &masks).unwrap();
    assert_eq!(tape.shape(rec), [masks[0].len() + masks[1].len(), cfg.patch_len()]);
    let tgt = recon_targets(&mut tape, &fwd, &masks, ReconTarget::RawPatch).unwrap();
    assert_eq!(tape.shape(tgt), tape.shape(rec));
    let none = vec![MaskSpec::empty(4); 2];
    assert!(matches!(decode_masked(&mut tape, &p, fwd.tokens, &none), Err(Error::EmptyMask)));
}

#[test]
fn identity_decoder_reproduces_tokens() {
    // gelu(z) - gelu(-z) = z holds exactly for the tanh form as well.
    let cfg = EncoderConfig {
        recon_target: ReconTarget::Embedding,
        ..tiny_cfg()
    };
    let d = cfg.dim;
    let mut store = init_model(&cfg, None, 1).unwrap();
    let w1 = Tensor::from_fn(&[d, 2 * d], |q| {
        let (i, j) = (q / (2 * d), q % (2 * d));
        if j == i {
            1.0
        } else if j == i + d {
            -1.0
        } else {
            0.0
        }
    });
    let w2 = Tensor::from_fn(&[2 * d, d], |q| {
        let (i, j) = (q / d, q % d);
        if i == j {
            1.0
        } else if i == j + d {
            -1.0
        } else {
            0.0
        }
    });
    store.insert("dec.w1", w1);
    store.insert("dec.w2", w2);
    let mut tape = Tape::new();
    let p = bind64(&store, &mut tape);
    let z = tape.constant(random_patches(4, d, 3));
    let m = MaskSpec {
        indices: vec![0, 2],
        n_tokens: 4,
        ratio: 0.5,
        seed: 0,
    };
    let out = decode_masked(&mut tape, &p, z, &[m]).unwrap();
    for (k, &i) in [0usize, 2].iter().enumerate() {
        for (a, b) in tape.value(out).row(k).iter().zip(tape.value(z).row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn reconstruction_gradient_reaches_encoder() {
    let cfg = tiny_cfg();
    let store = init_model(&cfg, None, 1).unwrap();
    let mut tape = Tape::new();
    let p = bind64(&store, &mut tape);
    let masks = vec![sample_mask(4, 0.7, 3).unwrap()];
    let fwd = forward(&mut tape, &cfg, &p, random_patches(4, 16, 2), 1, &masks).unwrap();
    let rec = decode_masked(&mut tape, &p, fwd.tokens, &masks).unwrap();
    let tgt = recon_targets(&mut tape, &fwd, &masks, ReconTarget::RawPatch).unwrap();
    let diff = tape.sub(rec, tgt).unwrap();
    let sq = tape.mul(diff, diff).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    for name in ["layer0.wq", "layer1.ffn.w1", "emb.w", "mask_token"] {
        let g = tape.grad(p.get(name).unwrap()).unwrap();
        assert!(g.data.iter().any(|&v| v != 0.0), "{name}");
    }
}

#[test]
fn embedding_target_is_detached() {
    let cfg = EncoderConfig {
        recon_target: ReconTarget::Embedding,
        ..tiny_cfg()
    };
    let store = init_model(&cfg, None, 1).unwrap();
    let mut tape = Tape::new();
    let p = bind64(&store, &mut tape);
    let masks = vec![MaskSpec {
        indices: vec![0, 1, 2, 3],
        n_tokens: 4,
        ratio: 0.0,
        seed: 0,
    }];
    let fwd = forward(&mut tape, &cfg, &p, random_patches(4, 16, 2), 1, &masks).unwrap();
    let tgt = recon_targets(&mut tape, &fwd, &masks, ReconTarget::Embedding).unwrap();
    let loss = tape.sum(tgt).unwrap();
    tape.backward(loss).unwrap();
    // Every token is masked, so the embedding only feeds the detached target.
    assert!(tape.grad(p.get("emb.w").unwrap()).is_none());
}

#[test]
fn projections_are_unit_and_scale_invariant() {
    let cfg = tiny_cfg();
    let mut store = init_model(&cfg, None, 1).unwrap();
    store.insert("proj.b", Tensor::zeros(&[cfg.projection_dim()]));
    let mut tape = Tape::new();
    let p = bind64(&store, &mut tape);
    let h = random_patches(3, cfg.dim, 11);
    let h2 = Tensor::new(h.shape.clone(), h.data.iter().map(|v| 2.0 * v).collect()).unwrap();
    let a = tape.constant(h);
    let b = tape.constant(h2);
    let za = project_contrastive(&mut tape, &p, a).unwrap();
    let zb = project_contrastive(&mut tape, &p, b).unwrap();
    for r in 0..3 {
        let n: f64 = tape.value(za).row(r).iter().map(|v| v * v).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-9);
        for (u, v) in tape.value(za).row(r).iter().zip(tape.value(zb).row(r)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn projection_hand_case_and_degenerate_input() {
    let mut store = ParamStore::<f64>::new();
    store.insert("proj.w", Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    store.insert("proj.b", Tensor::zeros(&[2]));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| true);
    let h = tape.constant(Tensor::matrix(&[&[3.0, 4.0]]).unwrap());
    let z = project_contrastive(&mut tape, &p, h).unwrap();
    assert_eq!(tape.value(z).data, vec![0.6, 0.8]);
    let zero = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(project_contrastive(&mut tape, &p, zero), Err(Error::DegenerateProjection)));
}

#[test]
fn classifier_shapes_and_degenerate_network() {
    let cfg = tiny_cfg();
    let mut store = init_classifier(&cfg, 5, 1).unwrap();
    let mut tape = Tape::new();
    let p = bind64(&store, &mut tape);
    let pooled = tape.constant(random_patches(3, cfg.dim, 12));
    let logits = classify(&mut tape, &cfg, &p, pooled).unwrap();
    assert_eq!(tape.shape(logits), [3, 5]);

    for (name, t) in store.tensors.iter_mut() {
        if name.starts_with("cls.block") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    store.insert("cls.b", Tensor::new(vec![5], vec![0.1, -0.2, 0.3, 0.0, 0.5]).unwrap());
    let mut tape = Tape::new();
    let p = bind64(&store, &mut tape);
    let zbar = random_patches(1, cfg.dim, 13);
    let m: f64 = zbar.data.iter().sum::<f64>() / cfg.dim as f64;
    let pooled = tape.constant(zbar);
    let logits = classify(&mut tape, &cfg, &p, pooled).unwrap();
    let w = store.get("cls.w").unwrap().cast::<f64>();
    let b = store.get("cls.b").unwrap().cast::<f64>();
    for k in 0..5 {
        let want: f64 = (0..cfg.cls_channels).map(|c| w.data[c * 5 + k] * m).sum::<f64>() + b.data[k];
        assert!((tape.value(logits).data[k] - want).abs() < 1e-12);
    }
}

#[test]
fn constant_tokens_pool_to_that_row() {
    let mut tape = Tape::<f64>::new();
    let row = [0.5, -1.0, 2.0];
    let z = tape.constant(Tensor::from_fn(&[4, 3], |q| row[q % 3]));
    let pooled = mean_pool(&mut tape, z, 1).unwrap();
    assert_eq!(tape.value(pooled).data, row.to_vec());
}

/// Build the masked-reconstruction loss from raw parameter leaves.
fn recon_graph(
    tape: &mut Tape<f64>,
    vars: &[Var],
    names: &[String],
    cfg: &EncoderConfig,
    patches: &Tensor<f64>,
    masks: &[MaskSpec],
) -> Result<Var> {
    let p = Bound {
        vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
    };
    let fwd = forward(tape, cfg, &p, patches.clone(), masks.len(), masks)?;
    let rec = decode_masked(tape, &p, fwd.tokens, masks)?;
    let tgt = recon_targets(tape, &fwd, masks, cfg.recon_target)?;
    let diff = tape.sub(rec, tgt)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq)?;
    let m: usize = masks.iter().map(MaskSpec::len).sum();
    tape.scale(s, 1.0 / m as f64)
}

#[test]
fn end_to_end_reconstruction_gradients() {
    let cfg = EncoderConfig {
        max_tokens: 4,
        init_std: 0.5,
        ..tiny_cfg()
    };
    let store = init_model(&cfg, None, 21).unwrap().cast::<f64>();
    let names: Vec<String> = store.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = store.tensors.values().cloned().collect();
    let grid = random_grid(8, 8, 5);
    let patches = patchify_batch::<f64>(
        &[&crate::specgen::Spectrogram {
            frames: 8,
            bins: 8,
            channels: 1,
            data: grid,
            label: Default::default(),
            normalized: true,
        }],
        4,
    )
    .unwrap();
    let masks = vec![sample_mask(4, 0.7, 1).unwrap()];
    let report = grad_check(|t, v| recon_graph(t, v, &names, &cfg, &patches, &masks), &inputs, 1e-5, 1e-4).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn full_block_gradients_in_double_precision() {
    let cfg = EncoderConfig {
        depth: 1,
        init_std: 0.5,
        ..tiny_cfg()
    };
    let store = init_backbone(&cfg, 9).unwrap().cast::<f64>();
    let names: Vec<String> = store.tensors.keys().filter(|k| k.starts_with("layer")).cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|k| store.tensors[k].clone()).collect();
    inputs.push(random_patches(5, cfg.dim, 2));
    let report = grad_check(
        |t, v| {
            let (params, z) = v.split_at(v.len() - 1);
            let p = Bound {
                vars: names.iter().cloned().zip(params.iter().copied()).collect(),
            };
            let out = encoder_forward(t, &cfg, &p, z[0], 1, None)?;
            let w = t.constant(random_patches(5, cfg.dim, 77));
            let prod = t.mul(out, w)?;
            t.sum(prod)
        },
        &inputs,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}
