use canopy_core::models::{
    build_model, evaluate_loss, predict_raster, se_block, train, Model, ModelCheckpoint, ModelConfig, ModelKind,
    SeWeights, TrainConfig,
};
use canopy_core::pipeline::{BandRole, BandStats, FeatureStack, PatchBatch};
use canopy_core::simulator::Pol;
use canopy_core::{Error, Raster};
use canopy_tensor::{gradcheck, Graph, NormMode, ParamStore, Probes, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(kind: ModelKind, in_channels: usize, levels: usize, base: usize) -> ModelConfig {
    ModelConfig {
        se_reduction: 4,
        ..ModelConfig::new(kind, in_channels).with_size(levels, base)
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Features with a learnable spatial relation to the target.
fn synthetic_batch(b: usize, c: usize, s: usize, seed: u64) -> PatchBatch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut reference = Vec::new();
    let mut mask = Vec::new();
    for _ in 0..b {
        let phase: f64 = rng.gen_range(0.0..6.0);
        let h: Vec<f64> = (0..s * s)
            .map(|i| {
                let (x, y) = ((i % s) as f64, (i / s) as f64);
                8.0 + 5.0 * ((x / 5.0 + phase).sin() * (y / 7.0).cos())
            })
            .collect();
        for ch in 0..c {
            features.extend(h.iter().map(|v| ((v - 8.0) / 5.0 * (ch as f64 + 1.0) / c as f64) as f32));
        }
        for &v in &h {
            let ok = rng.gen_bool(0.9);
            mask.push(if ok { 1.0f32 } else { 0.0 });
            reference.push(if ok { v as f32 } else { 0.0 });
        }
    }
    PatchBatch {
        features: Tensor::from_vec(&[b, c, s, s], features).unwrap(),
        reference: Tensor::from_vec(&[b, 1, s, s], reference).unwrap(),
        mask: Tensor::from_vec(&[b, 1, s, s], mask).unwrap(),
    }
}

fn loss_of(model: &Model<f64>, store: &ParamStore<f64>, g: &mut Graph<f64>, x: &Tensor<f64>, r: &Tensor<f64>, m: &Tensor<f64>) -> canopy_tensor::Var {
    let xv = g.input(x.clone());
    let pred = model.forward_with(g, store, None, xv, NormMode::Train).unwrap();
    g.masked_mse(pred, r, m).unwrap()
}

#[test]
fn nested_has_ten_nodes_at_depth_four() {
    let nested: Model<f32> = build_model(ModelConfig::new(ModelKind::Nested, 3), 0).unwrap();
    assert_eq!(nested.double_conv_count(), 10);
    let vanilla: Model<f32> = build_model(ModelConfig::new(ModelKind::Vanilla, 3), 0).unwrap();
    assert_eq!(vanilla.double_conv_count(), 7);
    for d in 2..6 {
        let m: Model<f32> = build_model(small(ModelKind::Nested, 2, d, 4), 0).unwrap();
        assert_eq!(m.double_conv_count(), d * (d + 1) / 2);
    }
}

#[test]
fn construction_is_seeded() {
    let cfg = small(ModelKind::Se, 4, 3, 8);
    let a: Model<f32> = build_model(cfg, 7).unwrap();
    let b: Model<f32> = build_model(cfg, 7).unwrap();
    let c: Model<f32> = build_model(cfg, 8).unwrap();
    assert!(a.params == b.params);
    assert!(a.params != c.params);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        ModelConfig::new(ModelKind::Vanilla, 3).with_size(1, 32),
        ModelConfig::new(ModelKind::Vanilla, 3).with_size(4, 2),
        ModelConfig::new(ModelKind::Vanilla, 0),
        ModelConfig {
            out_channels: 2,
            ..ModelConfig::new(ModelKind::Vanilla, 3)
        },
    ] {
        assert!(matches!(build_model::<f32>(cfg, 0), Err(Error::Config(_))));
    }
    assert!(matches!("resnet".parse::<ModelKind>(), Err(Error::Config(_))));
}

#[test]
fn se_bottleneck_width() {
    let m: Model<f32> = build_model(ModelConfig::new(ModelKind::Se, 3), 0).unwrap();
    let widths = m.se_bottlenecks();
    assert_eq!(widths.len(), 7);
    assert_eq!(widths[0], 2);
    assert_eq!(widths[3], 16);
    let narrow: Model<f32> = build_model(ModelConfig::new(ModelKind::Se, 3).with_size(2, 8), 0).unwrap();
    assert_eq!(narrow.se_bottlenecks()[0], 1);
}

#[test]
fn se_block_gate() {
    let mut store = ParamStore::<f64>::new();
    let w = SeWeights {
        w1: store.add("w1", Tensor::zeros(&[2, 4])),
        b1: store.add("b1", Tensor::zeros(&[2])),
        w2: store.add("w2", Tensor::zeros(&[4, 2])),
        b2: store.add("b2", Tensor::zeros(&[4])),
    };
    let x = random_tensor(&[2, 4, 5, 5], 1);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = se_block(&mut g, &store, xv, &w).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert_eq!(*a, 0.5 * b);
    }

    // Random weights: output / input is one gate per (batch, channel), in (0, 1).
    store.get_mut(w.w1).value = random_tensor(&[2, 4], 2).map(|v| 4.0 * v);
    store.get_mut(w.w2).value = random_tensor(&[4, 2], 3).map(|v| 4.0 * v);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = se_block(&mut g, &store, xv, &w).unwrap();
    let out = g.value(y).data();
    for plane in 0..8 {
        let ratios: Vec<f64> = (0..25).map(|i| out[plane * 25 + i] / x.data()[plane * 25 + i]).collect();
        assert!(ratios.iter().all(|r| *r > 0.0 && *r < 1.0));
        assert!(ratios.iter().all(|r| (r - ratios[0]).abs() < 1e-12));
    }
}

#[test]
fn every_kind_maps_full_patches_to_one_channel() {
    for kind in ModelKind::ALL {
        let m: Model<f32> = build_model(small(kind, 5, 4, 4), 1).unwrap();
        let x = random_tensor(&[2, 5, 128, 128], 0).cast::<f32>();
        assert_eq!(m.predict(&x).unwrap().shape(), &[2, 1, 128, 128]);
        let bad = random_tensor(&[1, 5, 20, 20], 0).cast::<f32>();
        assert!(matches!(m.predict(&bad), Err(Error::Config(_))));
    }
}

#[test]
fn nested_and_se_are_larger_than_vanilla() {
    let n = |k, levels, base| build_model::<f32>(ModelConfig::new(k, 6).with_size(levels, base), 0).unwrap().n_params();
    for (levels, base) in [(3, 8), (3, 16), (4, 32), (5, 4)] {
        let v = n(ModelKind::Vanilla, levels, base);
        assert!(n(ModelKind::Nested, levels, base) > v);
        assert!(n(ModelKind::Se, levels, base) > v);
    }
    // With two levels the only nested node is the vanilla decoder block.
    assert_eq!(n(ModelKind::Nested, 2, 8), n(ModelKind::Vanilla, 2, 8));
    assert!(n(ModelKind::Se, 2, 8) > n(ModelKind::Vanilla, 2, 8));
}

#[test]
fn full_models_pass_gradcheck() {
    let x = random_tensor(&[2, 3, 16, 16], 11);
    let r = random_tensor(&[2, 1, 16, 16], 12).map(|v| 5.0 + 3.0 * v);
    let m = random_tensor(&[2, 1, 16, 16], 13).map(|v| if v > -0.6 { 1.0 } else { 0.0 });
    for kind in ModelKind::ALL {
        let mut model: Model<f64> = build_model(small(kind, 3, 2, 8), 3).unwrap();
        model.target_mean = 5.0;
        model.target_std = 3.0;
        let mut store = model.params.clone();
        let report = gradcheck(&mut store, 1e-6, Probes::Sample { per_param: 6, seed: 5 }, |g, s| {
            Ok(loss_of(&model, s, g, &x, &r, &m))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{kind}: {report:?}");
    }
}

#[test]
fn small_adam_step_reduces_batch_loss() {
    use canopy_tensor::{AdamConfig, OptimizerState};
    let x = random_tensor(&[2, 3, 16, 16], 21);
    let r = random_tensor(&[2, 1, 16, 16], 22).map(|v| 5.0 + 3.0 * v);
    let m = Tensor::full(&[2, 1, 16, 16], 1.0);
    for kind in ModelKind::ALL {
        let mut model: Model<f64> = build_model(small(kind, 3, 2, 8), 4).unwrap();
        let mut g = Graph::new();
        let loss = loss_of(&model, &model.params, &mut g, &x, &r, &m);
        let before = g.value(loss).item();
        g.backward_into(loss, &mut model.params).unwrap();
        let mut opt = OptimizerState::new(&model.params, AdamConfig::default());
        opt.adam_step(&mut model.params, 1e-5).unwrap();
        let mut g = Graph::new();
        let loss = loss_of(&model, &model.params, &mut g, &x, &r, &m);
        let after = g.value(loss).item();
        assert!(after < before, "{kind}: {after} !< {before}");
    }
}

#[test]
fn masked_reference_pixels_are_invisible() {
    let x = random_tensor(&[2, 3, 16, 16], 31);
    let r = random_tensor(&[2, 1, 16, 16], 32).map(|v| 5.0 + 3.0 * v);
    let m = random_tensor(&[2, 1, 16, 16], 33).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let mut perturbed = r.clone();
    for (p, mk) in perturbed.data_mut().iter_mut().zip(m.data()) {
        if *mk == 0.0 {
            *p = 1e6;
        }
    }
    for kind in ModelKind::ALL {
        let model: Model<f64> = build_model(small(kind, 3, 2, 8), 5).unwrap();
        let run = |reference: &Tensor<f64>| {
            let mut g = Graph::new();
            let loss = loss_of(&model, &model.params, &mut g, &x, reference, &m);
            let mut store = model.params.clone();
            store.zero_grad();
            g.backward_into(loss, &mut store).unwrap();
            (g.value(loss).item(), store)
        };
        let (l0, s0) = run(&r);
        let (l1, s1) = run(&perturbed);
        assert_eq!(l0.to_bits(), l1.to_bits());
        for ((_, a), (_, b)) in s0.iter().zip(s1.iter()) {
            assert!(a.grad.data().iter().zip(b.grad.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}

#[test]
fn single_patch_overfits() {
    let patch = synthetic_batch(1, 3, 32, 41);
    let mut model: Model<f32> = build_model(small(ModelKind::Vanilla, 3, 3, 16), 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: 200,
        patience: None,
        ..Default::default()
    };
    let out = train(&mut model, &patch, &patch, &cfg).unwrap();
    assert_eq!(out.log.len(), 200);
    let loss = evaluate_loss(&mut model, &patch, 16).unwrap();
    assert!(loss < 0.1, "single-patch masked-MSE {loss}");
}

#[test]
fn training_is_reproducible_and_keeps_best_epoch() {
    let train_set = synthetic_batch(10, 3, 16, 51);
    let val_set = synthetic_batch(4, 3, 16, 52);
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 8,
        patience: Some(2),
        seed: 3,
        ..Default::default()
    };
    let run = || {
        let mut model: Model<f32> = build_model(small(ModelKind::Se, 3, 2, 8), 9).unwrap();
        let out = train(&mut model, &train_set, &val_set, &cfg).unwrap();
        (model, out)
    };
    let (mut model, a) = run();
    let (_, b) = run();
    assert_eq!(a.log, b.log);
    assert!(a.log.iter().all(|l| a.best_val_loss <= l.val_loss));
    assert_eq!(a.log[a.selected_epoch].val_loss, a.best_val_loss);
    assert_eq!(evaluate_loss(&mut model, &val_set, 4).unwrap(), a.best_val_loss);
    if a.stopped_early {
        assert_eq!(a.log.len(), a.selected_epoch + 3);
    }
}

#[test]
fn divergence_is_reported() {
    let train_set = synthetic_batch(4, 3, 16, 61);
    let mut model: Model<f32> = build_model(small(ModelKind::Vanilla, 3, 2, 8), 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e30,
        batch_size: 2,
        epochs: 3,
        ..Default::default()
    };
    assert!(matches!(train(&mut model, &train_set, &train_set, &cfg), Err(Error::Diverged { .. })));
}

fn checkpoint_for(stack: &FeatureStack, kind: ModelKind) -> ModelCheckpoint {
    let mut model: Model<f32> = build_model(small(kind, stack.n_bands(), 3, 8), 2).unwrap();
    model.target_mean = 7.0;
    model.target_std = 4.0;
    ModelCheckpoint {
        model,
        band_tags: stack.band_tags(),
        band_stats: vec![BandStats { mean: 0.5, std: 2.0 }; stack.n_bands()],
        combo: stack.combo.clone(),
        resolution: stack.resolution,
        scene_fingerprint: String::new(),
        split: None,
        train: TrainConfig::default(),
        log: Vec::new(),
        selected_epoch: 0,
        seed: 2,
    }
}

fn test_stack(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f64) -> FeatureStack {
    let bands = [BandRole::Sigma(Pol::Hh), BandRole::Sigma(Pol::Hv)]
        .into_iter()
        .enumerate()
        .map(|(b, role)| (role, Raster::from_fn(w, h, 20.0, |x, y| f(b, x, y))))
        .collect();
    let mask = Raster::from_fn(w, h, 20.0, |x, y| if (x * 7 + y * 3) % 23 == 0 { 0.0 } else { 1.0 });
    FeatureStack::new("sigma,hh,hv", 20, bands, mask, None).unwrap()
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let stack = test_stack(32, 32, |b, x, y| (b + x * y) as f64 * 0.01);
    for kind in ModelKind::ALL {
        let mut ckpt = checkpoint_for(&stack, kind);
        ckpt.model.running[0].mean[1] = 0.25;
        let path = dir.path().join(format!("{kind}.ckpt"));
        ckpt.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert!(back.model.params == ckpt.model.params);
        assert!(back.model.running == ckpt.model.running);
        assert_eq!(back.band_tags, ckpt.band_tags);
        let a = predict_raster(&ckpt, &stack).unwrap();
        let b = predict_raster(&back, &stack).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
    let mut bad = checkpoint_for(&stack, ModelKind::Vanilla);
    bad.band_stats.pop();
    assert!(matches!(bad.save(&dir.path().join("bad")), Err(Error::Config(_))));
    std::fs::write(dir.path().join("junk"), b"CNPYRST1........").unwrap();
    assert!(matches!(ModelCheckpoint::load(&dir.path().join("junk")), Err(Error::Format { .. })));
}

#[test]
fn single_window_prediction_matches_direct_forward() {
    let stack = test_stack(128, 128, |b, x, y| ((x as f64 / 9.0).sin() + (y as f64 / 13.0).cos()) * (b + 1) as f64);
    let ckpt = checkpoint_for(&stack, ModelKind::Nested);
    let pred = predict_raster(&ckpt, &stack).unwrap();
    let mut x = Vec::new();
    for (_, r) in stack.bands() {
        x.extend(r.values().iter().map(|v| ((v - 0.5) / 2.0) as f32));
    }
    let direct = ckpt.model.predict(&Tensor::from_vec(&[1, 2, 128, 128], x).unwrap()).unwrap();
    for (i, (p, d)) in pred.values().iter().zip(direct.data()).enumerate() {
        if stack.valid_mask.values()[i] == 1.0 {
            assert_eq!(*p, *d as f64);
        } else {
            assert!(p.is_nan());
        }
    }
}

#[test]
fn constant_input_gives_constant_interior() {
    let stack = test_stack(128, 128, |b, _, _| 1.0 + b as f64);
    let mut stack = stack;
    stack.valid_mask = Raster::filled(128, 128, 20.0, 1.0);
    for kind in ModelKind::ALL {
        let pred = predict_raster(&checkpoint_for(&stack, kind), &stack).unwrap();
        let centre = pred.get(64, 64);
        for y in 40..88 {
            for x in 40..88 {
                assert_eq!(pred.get(x, y), centre, "{kind} at ({x}, {y})");
            }
        }
    }
}

#[test]
fn prediction_contract() {
    let stack = test_stack(200, 150, |b, x, y| ((x + 2 * y) % 17) as f64 * 0.1 + b as f64);
    let ckpt = checkpoint_for(&stack, ModelKind::Vanilla);
    let pred = predict_raster(&ckpt, &stack).unwrap();
    assert_eq!((pred.width(), pred.height()), (200, 150));
    for (p, m) in pred.values().iter().zip(stack.valid_mask.values()) {
        assert_eq!(p.is_nan(), *m != 1.0);
    }

    let mut swapped = checkpoint_for(&stack, ModelKind::Vanilla);
    swapped.band_tags.reverse();
    assert!(matches!(predict_raster(&swapped, &stack), Err(Error::Config(_))));

    let foreign = canopy_core::pipeline::zscore_apply(&stack, &[BandStats { mean: 0.0, std: 1.0 }; 2]).unwrap();
    assert!(matches!(predict_raster(&ckpt, &foreign), Err(Error::Config(_))));
    let own = canopy_core::pipeline::zscore_apply(&stack, &ckpt.band_stats).unwrap();
    let again = predict_raster(&ckpt, &own).unwrap();
    assert!(again.values().iter().zip(pred.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
}
