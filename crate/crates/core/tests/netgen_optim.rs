use dipuq_core::netgen::{
    build_generator, load_checkpoint, sample_input_code, save_checkpoint, ForwardMode,
    GeneratorConfig,
};
use dipuq_core::optim::{adam_step, sgld_noise_std, sgld_step, AdamConfig, OptimState, StepSchedule};
use dipuq_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk() -> GeneratorConfig {
    GeneratorConfig {
        depth: 3,
        channels: vec![16, 32, 64],
        skip_channels: vec![4, 4, 4],
        kernel_size: 3,
        input_channels: 8,
        output_heads: 2,
        ..GeneratorConfig::default()
    }
}

fn tiny(dropout_p: f64) -> GeneratorConfig {
    GeneratorConfig {
        depth: 2,
        channels: vec![4, 6],
        skip_channels: vec![2, 0],
        input_channels: 3,
        dropout_p,
        ..GeneratorConfig::default()
    }
}

fn expected_parameter_count(cfg: &GeneratorConfig) -> usize {
    let k2 = cfg.kernel_size * cfg.kernel_size;
    let mut total = 0;
    for i in 0..cfg.depth {
        let cin = if i == 0 { cfg.input_channels } else { cfg.channels[i - 1] };
        let c = cfg.channels[i];
        let s = cfg.skip_channels[i];
        total += c * cin * k2 + 2 * c;
        if s > 0 {
            total += s * cin + 2 * s;
        }
        let from_below = if i + 1 == cfg.depth { c } else { cfg.channels[i + 1] };
        total += c * (from_below + s) * k2 + 2 * c;
    }
    total + cfg.output_heads * cfg.channels[0] + cfg.output_heads
}

#[test]
fn parameter_count_matches_layer_shapes() {
    for cfg in [desk(), tiny(0.0), GeneratorConfig { output_heads: 1, ..desk() }] {
        let net = build_generator::<f32>(&cfg).unwrap();
        assert_eq!(net.parameter_count(), expected_parameter_count(&cfg));
        let summed: usize = net.tensors().map(|t| t.len()).sum();
        assert_eq!(summed, net.parameter_count());
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = build_generator::<f32>(&desk()).unwrap();
    let b = build_generator::<f32>(&desk()).unwrap();
    for (x, y) in a.tensors().zip(b.tensors()) {
        assert_eq!(x, y);
    }
    let c = build_generator::<f32>(&GeneratorConfig { seed: 1, ..desk() }).unwrap();
    assert!(a.tensors().zip(c.tensors()).any(|(x, y)| x != y));
}

#[test]
fn depth_one_two_heads_output_shape() {
    let cfg = GeneratorConfig {
        depth: 1,
        channels: vec![8],
        skip_channels: vec![4],
        input_channels: 4,
        ..GeneratorConfig::default()
    };
    let net = build_generator::<f64>(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let code = sample_input_code::<f64, _>(16, 16, 4, 0.0, &mut rng).unwrap();
    let (x, nlv) = net.predict(&code.z0, ForwardMode::Deterministic, &mut rng).unwrap();
    assert_eq!(x.shape(), [1, 16, 16]);
    assert_eq!(nlv.unwrap().shape(), [1, 16, 16]);
}

#[test]
fn input_code_is_uniform_on_the_documented_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let code = sample_input_code::<f64, _>(100, 125, 8, 1.0 / 30.0, &mut rng).unwrap();
    let d = code.z0.data();
    assert_eq!(d.len(), 100_000);
    assert!(d.iter().all(|v| (0.0..=0.1).contains(v)));
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    assert!((mean - 0.05).abs() < 0.02 * 0.05, "{mean}");

    let again = sample_input_code::<f64, _>(100, 125, 8, 1.0 / 30.0, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    assert_eq!(code, again);
}

#[test]
fn perturbation_has_the_configured_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sigma = 1.0 / 30.0;
    let code = sample_input_code::<f64, _>(100, 100, 10, sigma, &mut rng).unwrap();
    let z = code.perturb(&mut rng);
    let diffs: Vec<f64> = z.data().iter().zip(code.z0.data()).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((std - sigma).abs() < 0.02 * sigma, "{std}");

    let fixed = sample_input_code::<f64, _>(8, 8, 2, 0.0, &mut rng).unwrap();
    assert_eq!(fixed.perturb(&mut rng), fixed.z0);

    let (mut r1, mut r2) = (ChaCha8Rng::seed_from_u64(9), ChaCha8Rng::seed_from_u64(9));
    assert_eq!(code.perturb(&mut r1), code.perturb(&mut r2));
}

#[test]
fn forward_modes_behave_as_documented() {
    let net = build_generator::<f64>(&tiny(0.3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let code = sample_input_code::<f64, _>(16, 16, 3, 0.0, &mut rng).unwrap();
    let (d1, _) = net.predict(&code.z0, ForwardMode::Deterministic, &mut rng).unwrap();
    let (d2, _) = net.predict(&code.z0, ForwardMode::Deterministic, &mut rng).unwrap();
    assert_eq!(d1, d2);
    assert!(d1.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    let (m1, _) = net
        .predict(&code.z0, ForwardMode::McSample, &mut ChaCha8Rng::seed_from_u64(10))
        .unwrap();
    let (m2, _) = net
        .predict(&code.z0, ForwardMode::McSample, &mut ChaCha8Rng::seed_from_u64(11))
        .unwrap();
    let diff = m1.data().iter().zip(m2.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff > 0.0);
}

#[test]
fn without_dropout_all_modes_coincide() {
    let net = build_generator::<f64>(&tiny(0.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let code = sample_input_code::<f64, _>(8, 8, 3, 0.0, &mut rng).unwrap();
    let outs: Vec<_> = [ForwardMode::Train, ForwardMode::McSample, ForwardMode::Deterministic]
        .into_iter()
        .map(|m| net.predict(&code.z0, m, &mut rng).unwrap())
        .collect();
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[1], outs[2]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    let net = build_generator::<f32>(&desk()).unwrap();
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.config(), net.config());
    for (a, b) in net.params().iter().zip(back.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor.shape(), b.tensor.shape());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.tensor), bits(&b.tensor));
    }
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}

fn scalar_adam_oracle(cfg: &AdamConfig, p0: f64, g: f64, steps: usize) -> Vec<f64> {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t as i32));
        let vh = v / (1.0 - cfg.beta2.powi(t as i32));
        p -= cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p);
        out.push(p);
    }
    out
}

#[test]
fn adam_matches_scalar_oracle_for_100_steps() {
    for (g, wd) in [(0.37, 0.0), (-2.5, 1e-3), (1e-4, 0.1)] {
        let cfg = AdamConfig {
            weight_decay: wd,
            ..AdamConfig::default()
        };
        let want = scalar_adam_oracle(&cfg, 0.8, g, 100);
        let mut params = vec![Tensor::new([1], vec![0.8f64]).unwrap()];
        let grads = vec![Tensor::new([1], vec![g]).unwrap()];
        let mut state = OptimState::new(cfg);
        for (t, w) in want.iter().enumerate() {
            adam_step(&mut params, &grads, &mut state).unwrap();
            assert_eq!(state.step(), t as u64 + 1);
            assert!((params[0].data()[0] - w).abs() < 1e-12, "g={g} step {t}");
        }
    }
}

#[test]
fn sgld_increment_variance_matches_injected_noise() {
    let eps_t = 1e-3;
    let scale = 0.5;
    let std = sgld_noise_std(eps_t, scale);
    let mut params = vec![Tensor::new([1], vec![0.0f64]).unwrap()];
    let grads = vec![Tensor::new([1], vec![0.0]).unwrap()];
    let mut state = OptimState::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut incs = Vec::with_capacity(n);
    for _ in 0..n {
        let before = params[0].data()[0];
        sgld_step(&mut params, &grads, &mut state, eps_t, scale, &mut rng).unwrap();
        incs.push(params[0].data()[0] - before);
    }
    let mean = incs.iter().sum::<f64>() / n as f64;
    let var = incs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    assert!((var / (std * std) - 1.0).abs() < 0.05, "{var} vs {}", std * std);
}

#[test]
fn sgld_is_reproducible_from_the_seed() {
    let run = || {
        let mut params = vec![Tensor::new([3], vec![0.1f64, -0.2, 0.3]).unwrap()];
        let grads = vec![Tensor::new([3], vec![0.5, -0.1, 0.0]).unwrap()];
        let mut state = OptimState::new(AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            sgld_step(&mut params, &grads, &mut state, 1e-2, 0.1, &mut rng).unwrap();
        }
        params[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn schedule_examples() {
    let s = StepSchedule::default();
    assert_eq!(s.step_size(0), 1e-2);
    assert!((s.step_size(1) - 9.99e-3).abs() < 1e-15);
    assert_eq!(s.step_size(1_000_000), 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn first_adam_step_ignores_gradient_scale(
        seed in any::<u64>(),
        c in 1e-2f64..1e3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..6)
            .map(|_| rng.random_range(0.1..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let p0: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let step = |scale: f64| {
            let mut params = vec![Tensor::new([6], p0.clone()).unwrap()];
            let grads = vec![Tensor::new([6], g.iter().map(|v| v * scale).collect()).unwrap()];
            let mut state = OptimState::new(AdamConfig::default());
            adam_step(&mut params, &grads, &mut state).unwrap();
            params[0].data().iter().zip(&p0).map(|(a, b)| a - b).collect::<Vec<_>>()
        };
        let (u1, uc) = (step(1.0), step(c));
        for (a, b) in u1.iter().zip(&uc) {
            prop_assert!((a - b).abs() < 1e-4 * 1e-2);
            prop_assert!(a.abs() <= 1e-2 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn step_size_never_increases(
        eps0 in 1e-6f64..1.0,
        gamma in 0.5f64..=1.0,
        t in 0u64..100_000,
    ) {
        let s = StepSchedule { eps0, gamma, floor: 1e-8 };
        prop_assert!(s.step_size(t + 1) <= s.step_size(t));
        prop_assert!(s.step_size(t) >= 1e-8);
    }

    #[test]
    fn sgld_without_noise_equals_adam_bitwise(seed in any::<u64>(), eps_t in 1e-5f64..1e-1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p0: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = AdamConfig { lr: eps_t, ..AdamConfig::default() };
        let mut a = vec![Tensor::new([5], p0.clone()).unwrap()];
        let mut b = a.clone();
        let grads = vec![Tensor::new([5], g).unwrap()];
        let (mut sa, mut sb) = (OptimState::new(cfg.clone()), OptimState::new(cfg));
        for _ in 0..3 {
            adam_step(&mut a, &grads, &mut sa).unwrap();
            sgld_step(&mut b, &grads, &mut sb, eps_t, 0.0, &mut rng).unwrap();
        }
        prop_assert_eq!(&a, &b);
    }
}
