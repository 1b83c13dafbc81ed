use super::*;
use crate::nn::{Bound, ParamStore};
use crate::tensor::{grad_check_many, grad_check_report, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, std, &mut r);
    }
}

/// Give every zero-initialized tensor (gates, modulation and output heads)
/// small random values, leaving the default-initialized layers alone.
fn open_gates(store: &mut ParamStore, std: f64, seed: u64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            let shape = t.shape().to_vec();
            *t = Tensor::randn(&shape, std, &mut r);
        }
    }
}

fn image(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    Tensor::randn(&[batch, cfg.channels, cfg.height(), cfg.width()], 1.0, &mut rng(seed))
}

#[test]
fn patchify_single_patch_is_the_flattened_image() {
    let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
    let t = patchify_tensor(&x, 4).unwrap();
    assert_eq!(t.shape(), &[1, 1, 16]);
    assert_eq!(t.data(), x.data());

    // With channels the token is (row, col, channel) ordered.
    let x = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64);
    let t = patchify_tensor(&x, 2).unwrap();
    assert_eq!(t.data(), &[0., 4., 8., 1., 5., 9., 2., 6., 10., 3., 7., 11.]);
}

#[test]
fn patchify_shapes_and_roundtrip() {
    let big = Tensor::zeros(&[1, 3, 256, 256]);
    assert_eq!(patchify_tensor(&big, 16).unwrap().shape(), &[1, 256, 768]);

    let x = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng(0));
    let t = patchify_tensor(&x, 8).unwrap();
    assert_eq!(t.shape(), &[2, 16, 192]);
    assert_eq!(unpatchify_tensor(&t, 8, 3, (32, 32)).unwrap(), x);

    // Token l covers the patch at row l / 4, column l % 4.
    let l = 6;
    let (r, c) = (l / 4, l % 4);
    let b = 1;
    let (py, px, ch) = (2, 5, 1);
    let img = x.data()[((b * 3 + ch) * 32 + 8 * r + py) * 32 + 8 * c + px];
    let tok = t.data()[(b * 16 + l) * 192 + (py * 8 + px) * 3 + ch];
    assert_eq!(img, tok);

    let tape = Tape::new();
    let v = patchify(tape.constant(x.clone()), 8).unwrap();
    assert_eq!(*v.value(), t);
    let back = unpatchify(v, 8, 3, (32, 32)).unwrap();
    assert_eq!(*back.value(), x);
}

#[test]
fn patchify_rejects_indivisible_images() {
    let x = Tensor::zeros(&[1, 3, 10, 8]);
    assert!(matches!(patchify_tensor(&x, 4), Err(crate::Error::Shape(_))));
    let t = Tensor::zeros(&[1, 5, 12]);
    assert!(unpatchify_tensor(&t, 2, 3, (4, 4)).is_err());
}

#[test]
fn sinusoid_matches_transformer_table() {
    let dim = 8;
    let e = sinusoidal(&[0.5], dim);
    let pos = 0.5 * TIMESTEP_SCALE;
    // Classic table: PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(..).
    for i in 0..dim / 2 {
        let angle = pos / 10_000f64.powf(2.0 * i as f64 / dim as f64);
        assert!((e.data()[dim / 2 + i] - angle.sin()).abs() < 1e-12);
        assert!((e.data()[i] - angle.cos()).abs() < 1e-12);
    }
    let z = sinusoidal(&[0.0], 5);
    assert_eq!(z.data(), &[1., 1., 0., 0., 0.]);
}

#[test]
fn condition_is_deterministic_and_checks_labels() {
    let cfg = ModelConfig::toy();
    let model = PixelDit::new(cfg.clone(), 1).unwrap();
    let run = |t: f64, y: usize| {
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let c = model.embed_condition(&tape, &p, &[t], &[y]).unwrap();
        ((*c.c.value()).clone(), (*c.t_emb.value()).clone())
    };
    let null = cfg.null_class();
    let (c0, _) = run(0.0, null);
    assert_eq!(c0.shape(), &[1, 1, cfg.hidden]);
    assert_eq!(run(0.0, null).0, c0);
    assert_eq!(run(0.3, 1), run(0.3, 1));
    assert_ne!(run(0.3, 1).0, run(0.3, 2).0);
    // The timestep embedding ignores the label.
    assert_eq!(run(0.3, 1).1, run(0.3, 2).1);

    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let err = model.embed_condition(&tape, &p, &[0.1], &[null + 1]);
    assert!(matches!(err, Err(crate::Error::Input(_))));
}

#[test]
fn patch_pathway_edge_cases() {
    for depth in [0, 3] {
        let cfg = ModelConfig {
            patch_depth: depth,
            ..ModelConfig::toy()
        };
        let model = PixelDit::new(cfg.clone(), 2).unwrap();
        let x = image(&cfg, 2, 3);
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let xv = tape.constant(x);
        let c = model.embed_condition(&tape, &p, &[0.2, 0.7], &[0, 1]).unwrap();
        let s0 = model.patch_embed.forward(&p, patchify(xv, cfg.patch_size).unwrap()).unwrap();
        let (s_n, tap) = model.patch_pathway(&p, xv, c.c).unwrap();
        assert!(tap.is_none());
        assert_eq!(*s_n.value(), *s0.value());
    }
}

#[test]
fn handoff_examples() {
    let model = PixelDit::new(ModelConfig::toy(), 0).unwrap();
    let tape = Tape::new();
    let s = Tensor::randn(&[2, 4, 16], 1.0, &mut rng(1));
    let t = Tensor::randn(&[2, 1, 16], 1.0, &mut rng(2));
    let cond = |t_emb: &Tensor| Conditioning {
        c: tape.constant(Tensor::zeros(&[2, 1, 16])),
        t_emb: tape.constant(t_emb.clone()),
    };
    let out = model.semantic_handoff(tape.constant(s.clone()), &cond(&Tensor::zeros(&[2, 1, 16]))).unwrap();
    assert_eq!(*out.value(), s);

    let out = model.semantic_handoff(tape.constant(Tensor::zeros(&[2, 4, 16])), &cond(&t)).unwrap();
    assert_eq!(out.shape(), vec![2, 4, 16]);
    let out = out.value();
    for b in 0..2 {
        for l in 0..4 {
            let row = &out.data()[(b * 4 + l) * 16..(b * 4 + l + 1) * 16];
            assert_eq!(row, &t.data()[b * 16..(b + 1) * 16]);
        }
    }
}

#[test]
fn pixel_adaln_param_layout() {
    let tape = Tape::new();
    let theta = tape.constant(Tensor::zeros(&[2, 5, 72]));
    let m = pixel_adaln_params(theta, 4, 3).unwrap();
    for g in m.groups() {
        assert_eq!(g.shape(), vec![2, 5, 4, 3]);
        assert!(g.value().data().iter().all(|&v| v == 0.0));
    }
    // Group order within each pixel row: β₁ γ₁ α₁ β₂ γ₂ α₂.
    let theta = tape.constant(Tensor::from_fn(&[1, 1, 72], |i| i as f64));
    let m = pixel_adaln_params(theta, 4, 3).unwrap();
    assert_eq!(&m.alpha1.value().data()[..3], &[6., 7., 8.]);
    assert_eq!(&m.alpha1.value().data()[3..6], &[24., 25., 26.]);
    assert!(matches!(
        pixel_adaln_params(tape.constant(Tensor::zeros(&[1, 1, 70])), 4, 3),
        Err(crate::Error::Config(_))
    ));
}

fn pit_setup(variant: Variant, seed: u64) -> (ParamStore, PitBlock) {
    let mut store = ParamStore::new();
    let shape = PitShape {
        hidden: 8,
        pixel_hidden: 4,
        pixels: 4,
        ptc_rate: 1,
        mlp_ratio: 4.0,
        variant,
    };
    let block = PitBlock::new(&mut store, "pit", shape, &mut rng(seed)).unwrap();
    (store, block)
}

#[test]
fn zero_gated_pit_block_is_identity() {
    for variant in [Variant::AGlobal, Variant::BPatchwise, Variant::CPixelwise, Variant::NoPixelAttention] {
        let (store, block) = pit_setup(variant, 1);
        let attn = crate::nn::AttentionConfig::new(8, 2, true, (2, 2)).unwrap();
        let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng(2));
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let cond = tape.constant(Tensor::randn(&[2, 4, 8], 1.0, &mut rng(3)));
        let y = block.forward(&p, tape.constant(x.clone()), cond, &attn).unwrap();
        assert_eq!(*y.value(), x);
    }
}

#[test]
fn pit_block_grad_check() {
    let (mut store, block) = pit_setup(Variant::CPixelwise, 5);
    randomize(&mut store, 0.4, 6);
    let attn = crate::nn::AttentionConfig::new(8, 2, true, (2, 2)).unwrap();
    let x = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng(7));
    let cond = Tensor::randn(&[1, 4, 8], 1.0, &mut rng(8));
    let w = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng(9));
    let n = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.push(x);
    inputs.push(cond);
    let err = grad_check_many(
        |tape, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let y = block.forward(&p, v[n], v[n + 1], &attn)?;
            Ok(y.mul(tape.constant(w.clone()))?.sum_all())
        },
        &inputs,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn pixel_attention_sees_one_token_per_patch() {
    let cfg = ModelConfig::preset_xl();
    assert_eq!(cfg.pixel_attention_tokens(), 256);
    let a = cfg.pixel_attention().unwrap();
    assert_eq!(a.grid.0 * a.grid.1, 256);

    let cfg = ModelConfig {
        ptc_rate: 2,
        ..ModelConfig::toy()
    };
    let model = PixelDit::new(cfg.clone(), 0).unwrap();
    assert_eq!(model.pixel_attention_tokens(), 2 * cfg.num_patches());
    let v = model.velocity(&image(&cfg, 1, 0), &[0.5], &[0]).unwrap();
    assert_eq!(v.shape(), &[1, 3, 8, 8]);
}

#[test]
fn forward_preserves_shape_and_starts_at_zero() {
    for variant in Variant::ALL {
        let cfg = ModelConfig {
            variant,
            pixel_depth: if variant == Variant::VanillaDit { 0 } else { 2 },
            resolution: [8, 12],
            ..ModelConfig::toy()
        };
        let model = PixelDit::new(cfg.clone(), 4).unwrap();
        let x = image(&cfg, 2, 5);
        let v = model.velocity(&x, &[0.1, 0.9], &[0, cfg.null_class()]).unwrap();
        assert_eq!(v.shape(), x.shape(), "{variant:?}");
        assert!(v.data().iter().all(|&e| e == 0.0), "{variant:?}");
    }
}

#[test]
fn zero_modulation_reduces_to_head_of_embedding() {
    let cfg = ModelConfig::toy();
    let mut model = PixelDit::new(cfg.clone(), 3).unwrap();
    let head = model.pixel_head.clone().unwrap();
    let w = Tensor::randn(&[cfg.pixel_hidden, cfg.channels], 1.0, &mut rng(1));
    let b = Tensor::randn(&[cfg.channels], 1.0, &mut rng(2));
    model.params.set(head.weight, w).unwrap();
    model.params.set(head.bias.unwrap(), b).unwrap();
    let x = image(&cfg, 2, 3);
    let v = model.velocity(&x, &[0.4, 0.6], &[1, 2]).unwrap();

    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let tokens = model.pixel_tokens(&p, tape.constant(x)).unwrap();
    let out = head.forward(&p, tokens).unwrap().reshape(&[2, cfg.num_patches(), cfg.patch_dim()]).unwrap();
    let want = unpatchify(out, cfg.patch_size, cfg.channels, (8, 8)).unwrap();
    assert_eq!(v, *want.value());
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::toy();
    let mut a = PixelDit::new(cfg.clone(), 9).unwrap();
    randomize(&mut a.params, 0.2, 1);
    let b = a.clone();
    let x = image(&cfg, 2, 0);
    let va = a.velocity(&x, &[0.3, 0.6], &[0, 2]).unwrap();
    assert_eq!(va, b.velocity(&x, &[0.3, 0.6], &[0, 2]).unwrap());
    assert_eq!(PixelDit::new(cfg.clone(), 9).unwrap().params.tensors(), PixelDit::new(cfg, 9).unwrap().params.tensors());
}

/// Copy every parameter `src` shares with `dst` (by name and shape).
fn copy_shared(dst: &mut ParamStore, src: &ParamStore) {
    for (name, t) in src.iter() {
        if let Some(id) = dst.id(name) {
            if dst.get(id).shape() == t.shape() {
                dst.set(id, t.clone()).unwrap();
            }
        }
    }
}

#[test]
fn pixelwise_with_duplicated_rows_equals_patchwise() {
    let base = ModelConfig::toy();
    let mut b = PixelDit::new(ModelConfig { variant: Variant::BPatchwise, ..base.clone() }, 1).unwrap();
    randomize(&mut b.params, 0.3, 2);
    let mut c = PixelDit::new(ModelConfig { variant: Variant::CPixelwise, ..base.clone() }, 1).unwrap();
    copy_shared(&mut c.params, &b.params);
    let rows = base.pixels_per_patch();
    let width = 6 * base.pixel_hidden;
    for j in 0..base.pixel_depth {
        for suffix in ["weight", "bias"] {
            let name = format!("pit.{j}.phi.{suffix}");
            let src = b.params.by_name(&name).unwrap().clone();
            let lead = src.numel() / width;
            let dup = Tensor::from_fn(&[lead, rows * width], |i| {
                let (r, col) = (i / (rows * width), i % (rows * width));
                src.data()[r * width + col % width]
            });
            let dup = if suffix == "bias" { dup.reshape(&[rows * width]).unwrap() } else { dup };
            c.params.set(c.params.id(&name).unwrap(), dup).unwrap();
        }
    }
    let x = image(&base, 2, 3);
    let vb = b.velocity(&x, &[0.2, 0.8], &[0, 1]).unwrap();
    let vc = c.velocity(&x, &[0.2, 0.8], &[0, 1]).unwrap();
    assert!(vb.max_abs_diff(&vc) <= 1e-12, "{}", vb.max_abs_diff(&vc));
    assert!(vb.sq_norm() > 0.0);
}

#[test]
fn patchwise_with_constant_conditioning_equals_global() {
    let (mut store_a, block_a) = pit_setup(Variant::AGlobal, 1);
    randomize(&mut store_a, 0.3, 2);
    let (mut store_b, block_b) = pit_setup(Variant::BPatchwise, 1);
    copy_shared(&mut store_b, &store_a);
    let attn = crate::nn::AttentionConfig::new(8, 2, true, (2, 2)).unwrap();
    let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng(3));
    let c = Tensor::randn(&[2, 1, 8], 1.0, &mut rng(4));
    let c_tiled = Tensor::from_fn(&[2, 4, 8], |i| c.data()[(i / 32) * 8 + i % 8]);

    let tape = Tape::new();
    let pa = store_a.bind_frozen(&tape);
    let pb = store_b.bind_frozen(&tape);
    let xv = tape.constant(x);
    let ya = block_a.forward(&pa, xv, tape.constant(c), &attn).unwrap().value();
    let yb = block_b.forward(&pb, xv, tape.constant(c_tiled), &attn).unwrap().value();
    assert!(ya.max_abs_diff(&yb) <= 1e-12, "{}", ya.max_abs_diff(&yb));
}

#[test]
fn variant_config_errors() {
    let bad_vanilla = ModelConfig { variant: Variant::VanillaDit, ..ModelConfig::toy() };
    assert!(matches!(PixelDit::new(bad_vanilla, 0), Err(crate::Error::Config(_))));
    let bad_rate = ModelConfig {
        variant: Variant::NoPixelAttention,
        ptc_rate: 2,
        ..ModelConfig::toy()
    };
    assert!(bad_rate.validate().is_err());
    let bad_heads = ModelConfig { heads: 3, ..ModelConfig::toy() };
    assert!(bad_heads.validate().is_err());
    let bad_res = ModelConfig { resolution: [9, 8], ..ModelConfig::toy() };
    assert!(bad_res.validate().is_err());
    let bad_tap = ModelConfig {
        repa: Some(RepaConfig { feature_dim: 4, tap_block: Some(3) }),
        ..ModelConfig::toy()
    };
    assert!(bad_tap.validate().is_err());
    assert!(ModelConfig::from_preset("xxl").is_err());
    assert_eq!(ModelConfig::from_preset("xl").unwrap(), ModelConfig::preset_xl());
}

#[test]
fn repa_tap_defaults_to_block_eight() {
    let cfg = ModelConfig {
        patch_depth: 3,
        repa: Some(RepaConfig { feature_dim: 5, tap_block: None }),
        ..ModelConfig::toy()
    };
    assert_eq!(cfg.repa_tap(), Some(3));
    assert_eq!(ModelConfig { patch_depth: 12, ..cfg.clone() }.repa_tap(), Some(8));
    let model = PixelDit::new(cfg.clone(), 0).unwrap();
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let out = model
        .forward(&tape, &p, tape.constant(image(&cfg, 2, 1)), &[0.5, 0.5], &[0, 1])
        .unwrap();
    assert_eq!(out.repa.unwrap().shape(), vec![2, cfg.num_patches(), 5]);
}

#[test]
fn end_to_end_grad_check_on_toy_model() {
    let cfg = ModelConfig::toy();
    let mut model = PixelDit::new(cfg.clone(), 0).unwrap();
    open_gates(&mut model.params, 0.5, 1);
    let x = image(&cfg, 1, 2);
    let w = image(&cfg, 1, 3);
    let n = model.params.len();
    let mut inputs = model.params.tensors().to_vec();
    inputs.push(x);
    let report = grad_check_report(
        |tape, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let out = model.forward(tape, &p, v[n], &[0.37], &[1])?;
            Ok(out.velocity.mul(tape.constant(w.clone()))?.sum_all())
        },
        &inputs,
        1e-3,
    )
    .unwrap();
    let name = model.params.names().get(report.input).cloned().unwrap_or("x".into());
    assert!(report.max_rel_error <= 1e-4, "{report:?} in {name}");
}

#[test]
fn checkpoint_roundtrip_is_idempotent() {
    let cfg = ModelConfig {
        repa: Some(RepaConfig { feature_dim: 6, tap_block: Some(1) }),
        ..ModelConfig::toy()
    };
    let mut model = PixelDit::new(cfg.clone(), 3).unwrap();
    randomize(&mut model.params, 0.2, 4);
    let bytes = model.to_checkpoint().unwrap().to_bytes().unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), bytes);
    assert_eq!(ck.model_config().unwrap(), cfg);

    let loaded = PixelDit::from_checkpoint(&ck, PARAM_PREFIX).unwrap();
    for ((n1, a), (n2, b)) in model.params.iter().zip(loaded.params.iter()) {
        assert_eq!(n1, n2);
        let mut a = a.clone();
        a.round_to_f32();
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(loaded.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);

    for cut in [4, 11, 20, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(crate::Error::Parse { offset, .. }) => assert!(offset <= cut),
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

#[test]
fn parameter_names_are_stable() {
    let model = PixelDit::new(ModelConfig::toy(), 0).unwrap();
    let names = model.params.names();
    for want in [
        "patch_embed.weight",
        "t_embed.fc1.weight",
        "cond.class_table",
        "patch.1.adaln.weight",
        "pixel_embed.weight",
        "pit.0.phi.weight",
        "pit.1.compact.weight",
        "pit.1.expand.bias",
        "pixel_head.weight",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    let phi = model.params.by_name("pit.0.phi.weight").unwrap();
    assert_eq!(phi.shape(), &[16, 4 * 6 * 4]);
}
