use canopy_tensor::init::uniform;
use canopy_tensor::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random values with |x| >= 0.1 so relu/max-pool probes stay off kinks.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let t: Tensor<f64> = uniform(shape, 1.0, r);
    t.map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

fn check<F>(store: &mut ParamStore<f64>, build: F) -> f64
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let report = gradcheck(store, STEP, Probes::All, build).unwrap();
    assert!(report.probes > 0);
    report.max_rel_error
}

/// Project a non-scalar output onto fixed random weights.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w: Tensor<f64> = uniform(g.value(y).shape(), 1.0, &mut rng(seed + 1000));
    g.weighted_sum(y, &w)
}

#[test]
fn conv2d_gradcheck() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", uniform(&[2, 2, 5, 5], 1.0, &mut r));
        let k = s.add("k", uniform(&[3, 2, 3, 3], 1.0, &mut r));
        let b = s.add("b", uniform(&[3], 1.0, &mut r));
        let err = check(&mut s, |g, st| {
            let (xv, kv, bv) = (g.param(st, x), g.param(st, k), g.param(st, b));
            let y = g.conv2d(xv, kv, Some(bv), 2, 1)?;
            project(g, y, seed)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn pointwise_conv_gradcheck() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", uniform(&[2, 3, 4, 4], 1.0, &mut r));
        let k = s.add("k", uniform(&[2, 3, 1, 1], 1.0, &mut r));
        let err = check(&mut s, |g, st| {
            let (xv, kv) = (g.param(st, x), g.param(st, k));
            let y = g.conv2d(xv, kv, None, 1, 0)?;
            project(g, y, seed)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn max_pool_gradcheck() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        // Distinct values spaced far apart relative to the probe step.
        let mut vals: Vec<f64> = (0..2 * 2 * 4 * 4).map(|i| i as f64 * 0.05).collect();
        rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut r);
        let x = s.add("x", Tensor::from_vec(&[2, 2, 4, 4], vals).unwrap());
        let err = check(&mut s, |g, st| {
            let xv = g.param(st, x);
            let y = g.max_pool2d(xv, 2)?;
            project(g, y, seed)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn max_pool_tie_routes_to_first_cell() {
    // All four cells tie; the gradient is routed to (0, 0) only. Finite
    // differences on a copy with cell (0, 0) nudged upward agree.
    let mut s = ParamStore::new();
    let x = s.add("x", Tensor::full(&[1, 1, 2, 2], 5.0));
    let mut g = Graph::new();
    let xv = g.param(&s, x);
    let y = g.max_pool2d(xv, 2).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    let mut tmp = s.clone();
    grads.accumulate_into(&mut tmp);
    assert_eq!(tmp.grad(x).data(), &[1.0, 0.0, 0.0, 0.0]);

    let mut perturbed = ParamStore::new();
    let px = perturbed.add("x", Tensor::from_f64(&[1, 1, 2, 2], &[5.0 + 1e-3, 5.0, 5.0, 5.0]).unwrap());
    let report = gradcheck(&mut perturbed, STEP, Probes::All, |g, st| {
        let xv = g.param(st, px);
        let y = g.max_pool2d(xv, 2)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error < TOL);
}

#[test]
fn upsample_gradcheck() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", uniform(&[1, 2, 3, 2], 1.0, &mut r));
        let err = check(&mut s, |g, st| {
            let xv = g.param(st, x);
            let y = g.upsample2x(xv)?;
            project(g, y, seed)
        });
        assert!(err < TOL);
    }
    // All-ones cotangent gives an all-fours gradient.
    let mut s = ParamStore::new();
    let x = s.add("x", Tensor::full(&[1, 1, 2, 2], 0.3));
    let mut g = Graph::new();
    let xv = g.param(&s, x);
    let y = g.upsample2x(xv).unwrap();
    let loss = g.sum(y);
    g.backward_into(loss, &mut s).unwrap();
    assert!(s.grad(x).data().iter().all(|&v| v == 4.0));
}

#[test]
fn concat_gradcheck() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let a = s.add("a", uniform(&[2, 1, 3, 3], 1.0, &mut r));
        let b = s.add("b", uniform(&[2, 3, 3, 3], 1.0, &mut r));
        let err = check(&mut s, |g, st| {
            let (av, bv) = (g.param(st, a), g.param(st, b));
            let y = g.concat_channels(av, bv)?;
            project(g, y, seed)
        });
        assert!(err < TOL);
    }
}

#[test]
fn batch_norm_gradcheck_both_modes() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", uniform(&[3, 2, 3, 3], 2.0, &mut r));
        let gamma = s.add("gamma", uniform(&[2], 1.5, &mut r));
        let beta = s.add("beta", uniform(&[2], 1.0, &mut r));
        for mode in [NormMode::Train, NormMode::Eval] {
            let mut running = RunningStats::new(2);
            running.mean = vec![0.3, -0.2];
            running.var = vec![1.7, 0.4];
            let err = check(&mut s, |g, st| {
                let (xv, gv, bv) = (g.param(st, x), g.param(st, gamma), g.param(st, beta));
                // Clone so probing does not move the running statistics.
                let mut rs = running.clone();
                let y = g.batch_norm2d(xv, gv, bv, Some(&mut rs), mode)?;
                project(g, y, seed)
            });
            assert!(err < TOL, "{mode:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn activations_gradcheck() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", away_from_zero(&[2, 3, 2, 2], &mut r));
        for kind in [Activation::Relu, Activation::Sigmoid] {
            let err = check(&mut s, |g, st| {
                let xv = g.param(st, x);
                let y = g.activation(xv, kind);
                project(g, y, seed)
            });
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
    }
}

#[test]
fn gap_linear_scale_gradcheck() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", uniform(&[2, 4, 3, 3], 1.0, &mut r));
        let w1 = s.add("w1", uniform(&[2, 4], 1.0, &mut r));
        let b1 = s.add("b1", uniform(&[2], 1.0, &mut r));
        let w2 = s.add("w2", uniform(&[4, 2], 1.0, &mut r));
        let err = check(&mut s, |g, st| {
            let xv = g.param(st, x);
            let pooled = g.global_avg_pool(xv)?;
            let (w1v, b1v, w2v) = (g.param(st, w1), g.param(st, b1), g.param(st, w2));
            let h = g.linear(pooled, w1v, Some(b1v))?;
            let gate = g.linear(h, w2v, None)?;
            let gate = g.sigmoid(gate);
            let y = g.scale_channels(xv, gate)?;
            project(g, y, seed)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn linear_op_is_nearly_exact() {
    let mut r = rng(9);
    let mut s = ParamStore::new();
    let x = s.add("x", uniform(&[3, 4], 1.0, &mut r));
    let w = s.add("w", uniform(&[2, 4], 1.0, &mut r));
    let b = s.add("b", uniform(&[2], 1.0, &mut r));
    let err = check(&mut s, |g, st| {
        let (xv, wv, bv) = (g.param(st, x), g.param(st, w), g.param(st, b));
        let y = g.linear(xv, wv, Some(bv))?;
        project(g, y, 9)
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn masked_mse_and_affine_gradcheck() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let p = s.add("p", uniform(&[2, 1, 3, 3], 3.0, &mut r));
        let reference: Tensor<f64> = uniform(&[2, 1, 3, 3], 3.0, &mut r);
        let mask = Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect()).unwrap();
        let err = check(&mut s, |g, st| {
            let pv = g.param(st, p);
            let scaled = g.affine(pv, 2.5, -1.0);
            g.masked_mse(scaled, &reference, &mask)
        });
        assert!(err < TOL);
    }
}

#[test]
fn composite_chain_matches_finite_differences() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", uniform(&[2, 2, 6, 6], 1.0, &mut r));
        let k = s.add("k", uniform(&[3, 2, 3, 3], 0.5, &mut r));
        let b = s.add("b", uniform(&[3], 0.5, &mut r));
        let gamma = s.add("gamma", uniform(&[3], 1.0, &mut r).map(|v| v + 1.5));
        let beta = s.add("beta", uniform(&[3], 0.5, &mut r));
        let err = check(&mut s, |g, st| {
            let xv = g.param(st, x);
            let (kv, bv) = (g.param(st, k), g.param(st, b));
            let y = g.conv2d(xv, kv, Some(bv), 1, 1)?;
            let (gv, betav) = (g.param(st, gamma), g.param(st, beta));
            let y = g.batch_norm2d(y, gv, betav, None, NormMode::Train)?;
            let y = g.relu(y);
            let y = g.max_pool2d(y, 2)?;
            project(g, y, seed)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn conv_is_linear_in_input() {
    let mut r = rng(11);
    let x: Tensor<f64> = uniform(&[1, 2, 5, 5], 1.0, &mut r);
    let k: Tensor<f64> = uniform(&[3, 2, 3, 3], 1.0, &mut r);
    let a = -2.75;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let kv = g.input(k.clone());
    let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
    let xs = g.input(x.map(|v| a * v));
    let ys = g.conv2d(xs, kv, None, 1, 1).unwrap();
    for (u, v) in g.value(y).data().iter().zip(g.value(ys).data()) {
        assert!((a * u - v).abs() < 1e-12);
    }
}

#[test]
fn conv_identity_and_zero_examples() {
    let mut r = rng(3);
    let x: Tensor<f32> = uniform(&[2, 1, 4, 4], 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let k = g.input(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = g.input(Tensor::zeros(&[1]));
    let y = g.conv2d(xv, k, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let z = g.input(Tensor::zeros(&[1, 3, 4, 4]));
    let k: Tensor<f32> = uniform(&[2, 3, 3, 3], 1.0, &mut r);
    let kv = g.input(k);
    let b = g.input(Tensor::zeros(&[2]));
    let y = g.conv2d(z, kv, Some(b), 1, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut r = rng(5);
        let x: Tensor<f32> = uniform(&[4, 3, 16, 16], 1.0, &mut r);
        let k: Tensor<f32> = uniform(&[8, 3, 3, 3], 1.0, &mut r);
        let mut g = Graph::new();
        let xv = g.input(x);
        let kv = g.leaf(k);
        let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
        let y = g.relu(y);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        (g.value(y).clone(), grads.get(kv).unwrap().clone())
    };
    assert_eq!(run(), run());
}
