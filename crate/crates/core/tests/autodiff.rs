use motionseg::autodiff::{adam_step, gradcheck, gradcheck_fn, AdamConfig, AdamState, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values whose pairwise gaps are at least `gap`, so max-pool and ReLU are
/// never probed at a kink.
fn separated(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(shape, vals).unwrap()
}

fn check(name: &str, inputs: &[Tensor<f64>], seed: u64, build: impl Fn(&mut Graph<f64>, &[motionseg::autodiff::Var]) -> motionseg::Result<motionseg::autodiff::Var>) {
    let r = gradcheck(inputs, build, TOL, seed).unwrap();
    assert!(r.passed(), "{name} seed {seed}: max rel error {} at {:?}", r.max_rel_error, r.worst);
}

#[test]
fn conv2d_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let w = random(&[2, 1, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        check("conv3x3", &[x, w, b], seed, |g, v| g.conv2d(v[0], v[1], v[2], 1));

        let x = random(&[2, 3, 6, 6], &mut rng);
        let w = random(&[2, 3, 5, 5], &mut rng);
        let b = random(&[2], &mut rng);
        check("conv5x5", &[x, w, b], seed, |g, v| g.conv2d(v[0], v[1], v[2], 2));

        let x = random(&[2, 3, 2, 4], &mut rng);
        let w = random(&[2, 3, 1, 1], &mut rng);
        let b = random(&[2], &mut rng);
        check("conv1x1", &[x, w, b], seed, |g, v| g.conv2d(v[0], v[1], v[2], 0));
    }
}

#[test]
fn conv_transpose_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&[2, 3, 3, 2], &mut rng);
        let w = random(&[3, 2, 2, 2], &mut rng);
        let b = random(&[2], &mut rng);
        check("conv_transpose2d", &[x, w, b], seed, |g, v| g.conv_transpose2d(v[0], v[1], v[2]));
    }
}

#[test]
fn pool_and_pointwise_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = separated(&[2, 2, 4, 6], 0.01, &mut rng);
        check("maxpool2", &[x.clone()], seed, |g, v| g.maxpool2(v[0]));
        check("relu", &[x], seed, |g, v| g.relu(v[0]));

        let a = random(&[1, 3, 2, 3], &mut rng);
        let b = random(&[1, 3, 2, 3], &mut rng);
        check("mul", &[a.clone(), b.clone()], seed, |g, v| g.mul(v[0], v[1]));

        let c = random(&[1, 2, 2, 3], &mut rng);
        check("concat", &[a.clone(), c], seed, |g, v| g.concat_channels(&[v[0], v[1]]));
        check("slice", &[a.clone()], seed, |g, v| g.slice_channels(v[0], 1, 2));
        check("softmax", &[a], seed, |g, v| g.softmax_channels(v[0]));
    }
}

#[test]
fn relu_away_from_zero_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = separated(&[1, 1, 4, 4], 0.1, &mut rng);
    let r = gradcheck(&[x], |g, v| g.relu(v[0]), 1e-6, 3).unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
}

#[test]
fn weighted_ce_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let logits = random(&[2, 2, 3, 3], &mut rng).map(|v| 3.0 * v);
        let target: Vec<u8> = (0..18).map(|_| rng.random_range(0..2)).collect();
        let valid: Vec<bool> = (0..18).map(|i| i % 4 != 0).collect();
        let weights = [1.475, 14.78];
        check("weighted_ce", &[logits], seed, |g, v| g.weighted_ce(v[0], &target, &weights, &valid));
    }
}

#[test]
fn composite_block_gradients() {
    // conv → relu → pool → transposed conv → softmax, as the network chains them.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = random(&[1, 2, 4, 4], &mut rng);
    let w = random(&[2, 2, 3, 3], &mut rng);
    let b = random(&[2], &mut rng);
    let wt = random(&[2, 2, 2, 2], &mut rng);
    let bt = random(&[2], &mut rng);
    check("chain", &[x, w, b, wt, bt], 0, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1)?;
        let y = g.relu(y)?;
        let y = g.maxpool2(y)?;
        let y = g.conv_transpose2d(y, v[3], v[4])?;
        g.softmax_channels(y)
    });
}

#[test]
fn corrupted_backward_is_caught() {
    // f(x) = Σ x², correct gradient 2x; report a gradient of 3x instead.
    let x = vec![vec![0.3, -1.2, 0.7]];
    let value = |v: &[Vec<f64>]| Ok(v[0].iter().map(|a| a * a).sum());
    let good = gradcheck_fn(&x, value, |v| Ok(vec![v[0].iter().map(|a| 2.0 * a).collect()]), TOL).unwrap();
    assert!(good.passed());
    let bad = gradcheck_fn(&x, value, |v| Ok(vec![v[0].iter().map(|a| 3.0 * a).collect()]), TOL).unwrap();
    assert!(!bad.passed());
    assert!(bad.max_rel_error > 0.3);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f32>::new();
        let x = g.constant(random(&[2, 3, 8, 8], &mut rng).cast());
        let w = g.constant(random(&[4, 3, 5, 5], &mut rng).cast());
        let b = g.constant(random(&[4], &mut rng).cast());
        let y = g.conv2d(x, w, b, 2).unwrap();
        let y = g.maxpool2(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut p = vec![0.5f32, -0.25, 1.0];
        let mut s = AdamState::new(3);
        for k in 0..10 {
            let g: Vec<f32> = p.iter().map(|v| v * (k as f32 + 1.0)).collect();
            adam_step(&mut p, &g, &mut s, &AdamConfig::default());
        }
        p
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_sums_to_one(vals in proptest::collection::vec(-30.0f32..30.0, 3 * 2 * 5)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(&[2, 3, 1, 5], vals).unwrap());
        let s = g.softmax_channels(x).unwrap();
        let d = g.value(s).data();
        for n in 0..2 {
            for p in 0..5 {
                let sum: f32 = (0..3).map(|c| d[(n * 3 + c) * 5 + p]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn concat_then_slice_recovers_inputs(
        ca in 1usize..4, cb in 1usize..4, n in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Tensor<f32> = random(&[n, ca, 2, 3], &mut rng).cast();
        let b: Tensor<f32> = random(&[n, cb, 2, 3], &mut rng).cast();
        let mut g = Graph::<f32>::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let cat = g.concat_channels(&[va, vb]).unwrap();
        let sa = g.slice_channels(cat, 0, ca).unwrap();
        let sb = g.slice_channels(cat, ca, cb).unwrap();
        prop_assert_eq!(g.value(sa), &a);
        prop_assert_eq!(g.value(sb), &b);
    }
}
