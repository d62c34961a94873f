mod support;

use otrecon::models::batch_tensor;
use otrecon::neural::{Checkpoint, Tensor};
use otrecon::projector::{synthesize, Dataset, ViewGeometry};
use otrecon::training::*;
use otrecon::volgrid::{Projection2D, ViewLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.base_width = 4;
    cfg.model.potential_widths = vec![4, 8];
    cfg.model.feature_widths = vec![4, 8];
    cfg.model.feature_dim = 16;
    cfg.batch_size = 2;
    cfg.inner_k = 2;
    cfg.total_steps = 2;
    cfg.sinkhorn.max_iters = 5000;
    cfg.sinkhorn.tolerance = 1e-12;
    cfg
}

fn tiny_data(n: usize) -> Dataset {
    synthesize(n, (8, 8, 8), &[ViewGeometry::frontal(), ViewGeometry::lateral()], 3).unwrap()
}

fn targets(data: &Dataset, idx: &[usize]) -> Tensor {
    batch_tensor(&idx.iter().map(|&i| &data.samples[i].volume).collect::<Vec<_>>()).unwrap()
}

fn random_view(seed: u64, n: usize) -> Projection2D {
    let mut r = rng(seed);
    Projection2D::new(1, n, n, (0..n * n).map(|_| r.gen::<f32>()).collect(), ViewLabel::Frontal).unwrap()
}

#[test]
fn identity_augmentation_is_a_no_op() {
    let v = random_view(1, 12);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        assert_eq!(augment(&v, &AugmentConfig::identity(), &mut r), v);
    }
}

#[test]
fn forced_flip_is_an_involution() {
    let v = random_view(2, 9);
    let cfg = AugmentConfig {
        hflip_prob: 1.0,
        ..AugmentConfig::identity()
    };
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let once = augment(&v, &cfg, &mut r);
    assert_ne!(once, v);
    assert_eq!(augment(&once, &cfg, &mut r), v);
}

#[test]
fn quarter_turn_matches_index_permutation() {
    for n in [6, 7, 16] {
        let v = random_view(n as u64, n);
        let r = rotate_view(&v, 90.0);
        for h in 0..n {
            for w in 0..n {
                let expect = v.get(0, w, n - 1 - h);
                assert!((r.get(0, h, w) - expect).abs() < 1e-6, "n={n} ({h},{w})");
            }
        }
    }
}

#[test]
fn augmentation_is_deterministic_per_stream() {
    let v = random_view(3, 16);
    let cfg = AugmentConfig::default();
    let a = augment(&v, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
    let b = augment(&v, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
    assert!(a.data().iter().all(|x| (0.0..=1.0).contains(x)));
}

#[test]
fn fixed_noise_repeats_and_resampled_noise_changes() {
    let v = random_view(4, 8);
    let block = |mode, draw| noise_ablation_composite(&v, 8, mode, 11, draw).unwrap().view_block(1).unwrap();
    assert_eq!(block(NoiseMode::FixedZ, 0), block(NoiseMode::FixedZ, 0));
    assert_eq!(block(NoiseMode::FixedZ, 0), block(NoiseMode::FixedZ, 5));
    assert_ne!(block(NoiseMode::ResampledZ, 0), block(NoiseMode::ResampledZ, 1));
    let c = noise_ablation_composite(&v, 8, NoiseMode::FixedZ, 11, 0).unwrap();
    assert_eq!(c.view_block(0).unwrap(), otrecon::volgrid::repeat(&v, 8).unwrap());
}

#[test]
fn zero_lambda_leaves_only_the_sinkhorn_term() {
    let data = tiny_data(2);
    let mut cfg = small_config();
    cfg.lambda = 0.0;
    let nets = Networks::init(&cfg, 1, [8, 8, 8]).unwrap();
    let input = prepare_inputs(&data, &[0, 1], &cfg.input, None, 0).unwrap();
    let out = nets.g.reconstruct(&input).unwrap();
    let t = loss_g_on_output(&nets, &out, &targets(&data, &[0, 1]), &cfg).unwrap();
    assert!(t.sinkhorn > 0.0);
    assert_eq!(t.total, t.sinkhorn);
}

#[test]
fn ground_truth_oracle_has_zero_divergence() {
    let data = tiny_data(3);
    let cfg = small_config();
    let nets = Networks::init(&cfg, 1, [8, 8, 8]).unwrap();
    let v = targets(&data, &[0, 1, 2]);
    let t = loss_g_on_output(&nets, &v, &v, &cfg).unwrap();
    assert!(t.sinkhorn.abs() < 1e-5, "{}", t.sinkhorn);
}

/// Zero-initialized biases put every background voxel (exactly 0 in the
/// phantoms) on a leaky-ReLU kink, where central differences are meaningless.
fn jitter_biases(nets: &mut Networks, seed: u64) {
    let mut r = rng(seed);
    for store in [nets.g.params_mut(), &mut nets.d.params, &mut nets.f.params] {
        for (name, t) in store.iter_mut() {
            if name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.1..0.1));
            }
        }
    }
}

fn check_param_grads(store_grads: &otrecon::neural::ParamStore, perturb: impl Fn(&str, usize, f64) -> f64, tol: f64) {
    let mut r = rng(5);
    let h = 1e-5;
    for (name, t) in store_grads.iter() {
        let grad = store_grads.grad(name).expect("every parameter receives a gradient");
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..3 {
            let i = r.gen_range(0..t.len());
            analytic.push(grad.data()[i]);
            numeric.push((perturb(name, i, h) - perturb(name, i, -h)) / (2.0 * h));
        }
        let e = vec_rel_err(&analytic, &numeric, 1e-6);
        assert!(e < tol, "{name}: rel err {e} analytic {analytic:?} numeric {numeric:?}");
    }
}

#[test]
fn generator_loss_gradients_match_finite_differences() {
    let data = tiny_data(2);
    for seed in 0..3 {
        let mut cfg = small_config();
        cfg.seed = seed;
        let mut nets = Networks::init(&cfg, 1, [8, 8, 8]).unwrap();
        jitter_biases(&mut nets, seed);
        let input = prepare_inputs(&data, &[0, 1], &cfg.input, None, 0).unwrap();
        let v = targets(&data, &[0, 1]);
        loss_g(&mut nets, &input, &v, &cfg).unwrap();
        assert!(nets.d.params.iter().all(|(n, _)| nets.d.params.grad(n).is_none()));
        let value = |name: &str, i: usize, dx: f64| {
            let mut n = nets.clone();
            n.g.params_mut().get_mut(name).unwrap().data_mut()[i] += dx;
            let out = n.g.reconstruct(&input).unwrap();
            loss_g_on_output(&n, &out, &v, &cfg).unwrap().total
        };
        check_param_grads(nets.g.params(), value, 5e-3);
    }
}

#[test]
fn cotrained_feature_gradients_match_finite_differences() {
    let data = tiny_data(2);
    let mut cfg = small_config();
    cfg.cotrain_f = true;
    let mut nets = Networks::init(&cfg, 1, [8, 8, 8]).unwrap();
    jitter_biases(&mut nets, 7);
    let input = prepare_inputs(&data, &[0, 1], &cfg.input, None, 0).unwrap();
    let v = targets(&data, &[0, 1]);
    loss_g(&mut nets, &input, &v, &cfg).unwrap();
    let out = nets.g.reconstruct(&input).unwrap();
    let value = |name: &str, i: usize, dx: f64| {
        let mut n = nets.clone();
        n.f.params.get_mut(name).unwrap().data_mut()[i] += dx;
        loss_g_on_output(&n, &out, &v, &cfg).unwrap().total
    };
    check_param_grads(&nets.f.params, value, 5e-3);
}

#[test]
fn potential_loss_gradients_match_finite_differences() {
    let data = tiny_data(2);
    for seed in 0..3 {
        let mut cfg = small_config();
        cfg.seed = seed;
        let mut nets = Networks::init(&cfg, 1, [8, 8, 8]).unwrap();
        jitter_biases(&mut nets, seed);
        let g_before = nets.g.params().clone();
        let input = prepare_inputs(&data, &[0, 1], &cfg.input, None, 0).unwrap();
        let v = targets(&data, &[0, 1]);
        loss_d(&mut nets, &input, &v).unwrap();
        assert!(nets.g.params().iter().all(|(n, _)| nets.g.params().grad(n).is_none()));
        assert_eq!(nets.g.params().iter().collect::<Vec<_>>(), g_before.iter().collect::<Vec<_>>());
        let out = nets.g.reconstruct(&input).unwrap();
        let value = |name: &str, i: usize, dx: f64| {
            let mut n = nets.clone();
            n.d.params.get_mut(name).unwrap().data_mut()[i] += dx;
            loss_d_on_output(&mut n, &out, &v, false).unwrap()
        };
        check_param_grads(&nets.d.params, value, 1e-3);
    }
}

#[test]
fn potential_loss_vanishes_on_identical_batches() {
    let data = tiny_data(2);
    let cfg = small_config();
    let mut nets = Networks::init(&cfg, 1, [8, 8, 8]).unwrap();
    let v = targets(&data, &[0, 1]);
    assert_eq!(loss_d_on_output(&mut nets, &v, &v, true).unwrap(), 0.0);
}

#[test]
fn constant_potential_gives_zero_loss_and_zero_grads() {
    let data = tiny_data(2);
    let cfg = small_config();
    let mut nets = Networks::init(&cfg, 1, [8, 8, 8]).unwrap();
    nets.d.params.zero_params();
    let input = prepare_inputs(&data, &[0, 1], &cfg.input, None, 0).unwrap();
    let l = loss_d(&mut nets, &input, &targets(&data, &[0, 1])).unwrap();
    assert_eq!(l, 0.0);
    for (n, _) in nets.d.params.iter() {
        if let Some(g) = nets.d.params.grad(n) {
            assert!(g.data().iter().all(|&x| x == 0.0), "{n}");
        }
    }
}

#[test]
fn empty_batch_is_a_contract_error() {
    let cfg = small_config();
    let mut nets = Networks::init(&cfg, 1, [8, 8, 8]).unwrap();
    let empty = Tensor::zeros(&[0, 1, 8, 8, 8]);
    assert!(matches!(loss_g_on_output(&nets, &empty, &empty, &cfg), Err(otrecon::Error::Contract(_))));
    assert!(matches!(loss_d_on_output(&mut nets, &empty, &empty, true), Err(otrecon::Error::Contract(_))));
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let data = tiny_data(2);
    let mut cfg = small_config();
    cfg.total_steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let st = train(&data, &cfg, TrainOptions { out_dir: Some(dir.path()), validation: None }, &mut ()).unwrap();
    assert_eq!(st.step, 0);
    assert!(st.history.is_empty());
    let files: Vec<_> = std::fs::read_dir(dir.path().join("checkpoints")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files, vec![std::ffi::OsString::from("step_000000.ckpt")]);
    let (loaded, _) = Networks::from_checkpoint(&Checkpoint::load(&checkpoint_path(dir.path(), 0)).unwrap()).unwrap();
    let init = Networks::init(&cfg, 1, [8, 8, 8]).unwrap();
    for (a, b) in [(loaded.g.params(), init.g.params()), (&loaded.d.params, &init.d.params)] {
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            // checkpoints store f32
            assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| (*x as f32) == (*y as f32)));
        }
    }
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let data = tiny_data(4);
    let cfg = small_config();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = train(&data, &cfg, TrainOptions { out_dir: Some(d1.path()), validation: None }, &mut ()).unwrap();
    let b = train(&data, &cfg, TrainOptions { out_dir: Some(d2.path()), validation: None }, &mut ()).unwrap();
    assert_eq!(a.history, b.history);
    for name in ["losses.csv", "checkpoints/step_000002.ckpt"] {
        assert_eq!(std::fs::read(d1.path().join(name)).unwrap(), std::fs::read(d2.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn config_validation_rejects_bad_values() {
    let mut cfg = small_config();
    cfg.lambda = -0.1;
    assert!(cfg.validate().is_err());
    let mut cfg = small_config();
    cfg.inner_k = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = small_config();
    cfg.model.generator = GeneratorKind::BaselineAe;
    cfg.input.mode = InputMode::NoiseFixed;
    assert!(cfg.validate().is_err());
}
