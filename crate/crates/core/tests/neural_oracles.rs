mod support;

use otrecon::neural::*;
use otrecon::Error;
use support::*;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;

#[test]
fn pointwise_identity_kernel_returns_input() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[2, 1, 3, 4, 5]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
    let y = g.conv3d(xv, w, None, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn ones_kernel_counts_neighbourhood() {
    let (c, v) = (3, 0.7);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, c, 5, 5, 5], v));
    let w = g.constant(Tensor::full(&[1, c, 3, 3, 3], 1.0));
    let y = g.conv3d(x, w, None, [1, 1, 1], [1, 1, 1]).unwrap();
    let out = g.value(y).data();
    assert!((out[(2 * 5 + 2) * 5 + 2] - 27.0 * v * c as f64).abs() < 1e-12);
    assert!((out[0] - 8.0 * v * c as f64).abs() < 1e-12);
}

#[test]
fn conv3d_matches_naive_loops() {
    let mut r = rng(2);
    let cases = [
        ([2, 2, 4, 4, 4], [3, 2, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
        ([2, 2, 4, 4, 4], [2, 2, 3, 3, 3], [2, 2, 2], [1, 1, 1]),
        ([1, 3, 5, 4, 6], [2, 3, 2, 3, 1], [1, 2, 1], [0, 1, 0]),
        ([2, 2, 4, 4, 4], [4, 2, 1, 1, 1], [1, 1, 1], [0, 0, 0]),
    ];
    for (xs, ws, s, p) in cases {
        let x = random_tensor(&mut r, &xs);
        let w = random_tensor(&mut r, &ws);
        let b = random_tensor(&mut r, &[ws[0]]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv3d(xv, wv, Some(bv), s, p).unwrap();
        let oracle = naive_conv3d(&x, &w, Some(&b), s, p);
        assert_eq!(g.shape(y), oracle.shape());
        for (a, o) in g.value(y).data().iter().zip(oracle.data()) {
            assert!((a - o).abs() < 1e-5);
        }
    }
}

#[test]
fn conv3d_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3, 3]));
    assert!(matches!(
        g.conv3d(x, w, None, [1, 1, 1], [1, 1, 1]),
        Err(Error::InvalidDimension(_))
    ));
    let small = g.constant(Tensor::zeros(&[1, 3, 2, 2, 2]));
    assert!(g.conv3d(small, w, None, [1, 1, 1], [0, 0, 0]).is_err());
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    let mut r = rng(3);
    let cases = [
        ([1, 2, 4, 4, 4], [2, 2, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
        ([2, 1, 5, 4, 3], [2, 1, 3, 3, 3], [2, 2, 2], [1, 1, 1]),
        ([1, 2, 3, 3, 3], [3, 2, 1, 1, 1], [1, 1, 1], [0, 0, 0]),
        ([1, 1, 4, 4, 1], [2, 1, 3, 3, 1], [2, 2, 1], [1, 1, 0]),
    ];
    for (i, (xs, ws, s, p)) in cases.into_iter().enumerate() {
        let inputs = [random_tensor(&mut r, &xs), random_tensor(&mut r, &ws), random_tensor(&mut r, &[ws[0]])];
        let err = grad_check(&inputs, H, |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), s, p).unwrap();
            weighted_sum(g, y, i as u64)
        });
        assert!(err < TOL, "case {i}: {err}");
    }
}

#[test]
fn conv_transpose_matches_scatter_definition_and_gradients() {
    let mut r = rng(4);
    let cases = [
        ([1, 2, 3, 3, 3], [2, 3, 2, 2, 2], [2, 2, 2], [0, 0, 0]),
        ([2, 2, 2, 3, 2], [2, 1, 3, 3, 3], [2, 2, 2], [1, 1, 1]),
        ([1, 3, 3, 2, 4], [3, 2, 3, 1, 3], [1, 1, 1], [1, 0, 1]),
    ];
    for (i, (xs, ws, s, p)) in cases.into_iter().enumerate() {
        let x = random_tensor(&mut r, &xs);
        let w = random_tensor(&mut r, &ws);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv_transpose3d(xv, wv, None, s, p).unwrap();
        let oracle = naive_conv_transpose3d(&x, &w, s, p);
        assert_eq!(g.shape(y), oracle.shape());
        assert!(vec_rel_err(g.value(y).data(), oracle.data(), 1e-12) < 1e-12);
        let b = random_tensor(&mut r, &[ws[1]]);
        let err = grad_check(&[x, w, b], H, |g, v| {
            let y = g.conv_transpose3d(v[0], v[1], Some(v[2]), s, p).unwrap();
            weighted_sum(g, y, i as u64)
        });
        assert!(err < TOL, "case {i}: {err}");
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[1, 2, 5, 5, 5]);
    let w = random_tensor(&mut r, &[3, 2, 3, 3, 3]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv3d(xv, wv, None, [2, 2, 2], [1, 1, 1]).unwrap();
    let u = random_tensor(&mut r, g.shape(y));
    let uv = g.constant(u.clone());
    let back = g.conv_transpose3d(uv, wv, None, [2, 2, 2], [1, 1, 1]).unwrap();
    assert_eq!(g.shape(back), x.shape());
    let lhs: f64 = g.value(y).data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(back).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn elementwise_and_norm_gradients() {
    let mut r = rng(6);
    for (i, shape) in [[1usize, 2, 3, 3, 3], [2, 3, 2, 4, 3], [2, 1, 4, 2, 2]].into_iter().enumerate() {
        let seed = i as u64;
        let x = random_tensor(&mut r, &shape);
        let gamma = random_tensor(&mut r, &[shape[1]]);
        let beta = random_tensor(&mut r, &[shape[1]]);
        let checks: Vec<(&str, f64)> = vec![
            ("leaky_relu", grad_check(&[x.clone()], H, |g, v| {
                let y = g.leaky_relu(v[0], 0.2);
                weighted_sum(g, y, seed)
            })),
            ("sigmoid", grad_check(&[x.clone()], H, |g, v| {
                let y = g.sigmoid(v[0]);
                weighted_sum(g, y, seed)
            })),
            ("instance_norm", grad_check(&[x.clone(), gamma.clone(), beta.clone()], H, |g, v| {
                let y = g.instance_norm(v[0], Some(v[1]), Some(v[2])).unwrap();
                weighted_sum(g, y, seed)
            })),
            ("upsample", grad_check(&[x.clone()], H, |g, v| {
                let y = g.upsample(v[0], 2).unwrap();
                weighted_sum(g, y, seed)
            })),
            ("global_avg_pool", grad_check(&[x.clone()], H, |g, v| {
                let y = g.global_avg_pool(v[0]).unwrap();
                weighted_sum(g, y, seed)
            })),
            ("concat", grad_check(&[x.clone(), x.map(|v| v * v)], H, |g, v| {
                let y = g.concat(&[v[0], v[1], v[0]]).unwrap();
                weighted_sum(g, y, seed)
            })),
            ("mul_sub_mean", grad_check(&[x.clone(), x.map(|v| v.sin())], H, |g, v| {
                let d = g.sub(v[0], v[1]).unwrap();
                let sq = g.mul(d, d).unwrap();
                let s = g.scale(sq, 3.0);
                g.mean(s)
            })),
            ("flatten_linear", grad_check(&[x.clone(), random_tensor(&mut rng(seed), &[4, x.len() / shape[0]]), Tensor::full(&[4], 0.3)], H, |g, v| {
                let f = g.flatten(v[0]).unwrap();
                let y = g.linear(f, v[1], Some(v[2])).unwrap();
                weighted_sum(g, y, seed)
            })),
        ];
        for (name, err) in checks {
            assert!(err < TOL, "{name} on {shape:?}: {err}");
        }
    }
}

#[test]
fn upsample_matches_naive_and_preserves_constants() {
    let mut r = rng(7);
    let x = random_tensor(&mut r, &[2, 2, 3, 2, 4]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.upsample(xv, 2).unwrap();
    let oracle = naive_upsample(&x, 2);
    assert_eq!(g.value(y).shape(), oracle.shape());
    assert!(vec_rel_err(g.value(y).data(), oracle.data(), 1e-12) < 1e-14);
    let c = g.constant(Tensor::full(&[1, 1, 2, 2, 2], 0.4));
    let up = g.upsample(c, 3).unwrap();
    assert!(g.value(up).data().iter().all(|v| (v - 0.4).abs() < 1e-15));
}

#[test]
fn instance_norm_normalizes_each_channel() {
    let mut r = rng(8);
    let mut g = Graph::new();
    let x = g.constant(random_tensor(&mut r, &[2, 3, 4, 4, 4]));
    let y = g.instance_norm(x, None, None).unwrap();
    for blk in g.value(y).data().chunks_exact(64) {
        let mean = blk.iter().sum::<f64>() / 64.0;
        let var = blk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn backward_closed_forms() {
    let mut r = rng(9);
    let xt = random_tensor(&mut r, &[3, 4]);
    let yt = random_tensor(&mut r, &[3, 4]);
    let mut g = Graph::new();
    let x = g.variable(xt.clone());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.variable(xt.clone());
    let y = g.constant(yt.clone());
    let d = g.sub(x, y).unwrap();
    let sq = g.mul(d, d).unwrap();
    let l = g.mean(sq);
    g.backward(l).unwrap();
    for ((gx, a), b) in g.grad(x).unwrap().data().iter().zip(xt.data()).zip(yt.data()) {
        assert!((gx - 2.0 * (a - b) / 12.0).abs() < 1e-15);
    }
    assert!(g.grad(y).is_none());
}

#[test]
fn backward_rejects_non_scalar_and_accumulates() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::full(&[2, 2], 1.0));
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    let l = g.sum(y);
    g.backward(l).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 4.0));
    let unused = g.variable(Tensor::scalar(1.0));
    g.backward(l).unwrap();
    assert!(g.grad(unused).is_none());
}

#[test]
fn three_layer_conv_net_parameter_gradients() {
    let mut r = rng(10);
    for case in 0..3u64 {
        let x = random_tensor(&mut r, &[2, 1, 6, 6, 6]);
        let inputs = vec![
            x,
            random_tensor(&mut r, &[3, 1, 3, 3, 3]),
            random_tensor(&mut r, &[3]),
            random_tensor(&mut r, &[4, 3, 3, 3, 3]),
            random_tensor(&mut r, &[4]),
            random_tensor(&mut r, &[1, 4, 3, 3, 3]),
            random_tensor(&mut r, &[1]),
        ];
        let err = grad_check(&inputs, H, |g, v| {
            let h1 = g.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1]).unwrap();
            let a1 = g.leaky_relu(h1, 0.1);
            let h2 = g.conv3d(a1, v[3], Some(v[4]), [2, 2, 2], [1, 1, 1]).unwrap();
            let n2 = g.instance_norm(h2, None, None).unwrap();
            let a2 = g.leaky_relu(n2, 0.1);
            let h3 = g.conv3d(a2, v[5], Some(v[6]), [1, 1, 1], [1, 1, 1]).unwrap();
            let s = g.sigmoid(h3);
            weighted_sum(g, s, case)
        });
        assert!(err < TOL, "case {case}: {err}");
    }
}

#[test]
fn custom_scalar_scales_supplied_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::full(&[3], 1.0));
    let c = g
        .custom_scalar(5.0, vec![(x, Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())])
        .unwrap();
    let l = g.scale(c, 2.0);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    assert!(g.custom_scalar(1.0, vec![(x, Tensor::zeros(&[2]))]).is_err());
}

fn scalar_store(w: f64, grad: f64) -> ParamStore {
    let mut p = ParamStore::new(0);
    p.insert("w", Tensor::scalar(w)).unwrap();
    p.set_grad("w", Tensor::scalar(grad)).unwrap();
    p
}

#[test]
fn adamw_zero_grad_keeps_params() {
    let mut p = scalar_store(1.5, 0.0);
    let mut st = OptimizerState::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    adamw_step(&mut p, &mut st).unwrap();
    assert_eq!(p.get("w").unwrap().data(), &[1.5]);
    assert_eq!(st.step(), 1);
}

#[test]
fn adamw_single_step_hand_computed() {
    let mut p = scalar_store(1.0, 1.0);
    let mut st = OptimizerState::new(AdamWConfig {
        lr: 0.1,
        beta1: 0.0,
        beta2: 0.0,
        eps: 0.0,
        weight_decay: 0.0,
    });
    adamw_step(&mut p, &mut st).unwrap();
    assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
}

#[test]
fn adamw_decay_is_decoupled() {
    let mut p = scalar_store(2.0, 0.0);
    let mut st = OptimizerState::new(AdamWConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.5,
    });
    adamw_step(&mut p, &mut st).unwrap();
    // zero gradient: only the decay term moves the weight
    assert!((p.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
}

#[test]
fn adamw_converges_on_quadratic() {
    let mut p = scalar_store(0.0, 0.0);
    let mut st = OptimizerState::new(AdamWConfig {
        lr: 0.05,
        beta1: 0.5,
        beta2: 0.9,
        eps: 1e-8,
        weight_decay: 0.0,
    });
    for _ in 0..100 {
        let mut g = Graph::new();
        let w = g.param(&p, "w").unwrap();
        let t = g.constant(Tensor::scalar(3.0));
        let d = g.sub(w, t).unwrap();
        let l = g.mul(d, d).unwrap();
        let l = g.sum(l);
        g.backward(l).unwrap();
        p.zero_grad();
        p.accumulate_grads(&g).unwrap();
        adamw_step(&mut p, &mut st).unwrap();
    }
    let w = p.get("w").unwrap().data()[0];
    assert!((w - 3.0).abs() < 0.05, "w = {w}");
}

#[test]
fn adamw_requires_gradients() {
    let mut p = ParamStore::new(0);
    p.insert("w", Tensor::scalar(1.0)).unwrap();
    let mut st = OptimizerState::new(AdamWConfig::default());
    assert!(matches!(adamw_step(&mut p, &mut st), Err(Error::Contract(_))));
}

#[test]
fn kaiming_statistics() {
    let t = kaiming_init(&[1000, 100], 42).unwrap();
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let target = 0.02f64.sqrt();
    assert!((std - target).abs() / target < 0.05, "std {std}");
    assert!(mean.abs() < 3.0 * target / n.sqrt(), "mean {mean}");
    assert_eq!(t, kaiming_init(&[1000, 100], 42).unwrap());
    assert_ne!(t, kaiming_init(&[1000, 100], 43).unwrap());
}

#[test]
fn param_store_names_are_unique() {
    let mut p = ParamStore::new(1);
    p.insert("a", Tensor::scalar(1.0)).unwrap();
    assert!(p.insert("a", Tensor::scalar(2.0)).is_err());
    assert!(p.set("a", Tensor::zeros(&[2])).is_err());
}

#[test]
fn checkpoint_round_trip() {
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    let mut r = rng(11);
    let mut g = ParamStore::new(1);
    g.insert("conv.w", random_tensor(&mut r, &[2, 1, 3, 3, 3])).unwrap();
    g.insert("conv.b", Tensor::full(&[2], 0.25)).unwrap();
    let mut d = ParamStore::new(2);
    d.insert("head.w", random_tensor(&mut r, &[1, 4])).unwrap();
    let mut stream = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    stream.set_stream(3);
    stream.next_u64();
    let ck = Checkpoint::from_stores(
        17,
        Some(RngState::capture(&stream)),
        serde_json::json!({"kind": "test"}),
        &[("g", &g), ("d", &d)],
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 17);
    assert_eq!(back.meta, ck.meta);
    let mut restored = back.rng.as_ref().unwrap().restore().unwrap();
    assert_eq!(restored.next_u64(), stream.next_u64());
    let mut g2 = g.clone();
    g2.zero_params();
    back.load_into("g", &mut g2).unwrap();
    for ((_, a), (_, b)) in g.iter().zip(g2.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
    assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes().unwrap());
    let mut wrong = ParamStore::new(0);
    wrong.insert("head.w", Tensor::zeros(&[1, 5])).unwrap();
    assert!(back.load_into("d", &mut wrong).is_err());
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(12);
    let x = random_tensor(&mut r, &[2, 2, 6, 6, 6]);
    let w = random_tensor(&mut r, &[4, 2, 3, 3, 3]);
    let run = || {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv3d(xv, wv, None, [2, 2, 2], [1, 1, 1]).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}
