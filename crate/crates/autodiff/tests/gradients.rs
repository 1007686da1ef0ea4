//! Backward rules against central finite differences.

use forgetgate_autodiff::{grad_check, relative_error, rng_from_seed, Graph, ParameterSet, Result, Rng, Tensor, Var};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr_free::normal;

mod rand_distr_free {
    use super::*;
    /// Box-Muller; keeps the test oracle free of the crate's own helpers.
    pub fn normal(rng: &mut Rng) -> f64 {
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn random(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * normal(rng)).collect()).unwrap()
}

fn one_hot_rows(b: usize, c: usize, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(&[b, c]);
    for i in 0..b {
        t.set2(i, rng.random_range(0..c), 1.0);
    }
    t
}

/// Runs `build` on a fresh graph with `params` registered and returns the
/// scalar loss plus gradients for every parameter.
fn eval<F>(params: &ParameterSet, build: &F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let loss = build(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    let value = g.value(loss).item();
    let out = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
        .collect();
    Ok((value, out))
}

fn check<F>(params: &ParameterSet, build: F, samples: usize) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = rng_from_seed(99);
    grad_check(params, |p| eval(p, &build), samples, &mut rng)
        .unwrap()
        .max_relative_error
}

#[test]
fn matmul_backward_matches_finite_differences() {
    let mut rng = rng_from_seed(1);
    let mut p = ParameterSet::new();
    p.push("a", random(&[5, 4], 1.0, &mut rng));
    p.push("b", random(&[4, 3], 1.0, &mut rng));
    let weights = random(&[5, 3], 1.0, &mut rng);
    let err = check(
        &p,
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.mul_const(y, weights.clone())?;
            g.sum(y)
        },
        1000,
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn cross_entropy_backward_matches_finite_differences() {
    let mut rng = rng_from_seed(2);
    let mut p = ParameterSet::new();
    p.push("logits", random(&[4, 10], 2.0, &mut rng));
    let targets = one_hot_rows(4, 10, &mut rng);
    let err = check(&p, |g, v| g.cross_entropy(v[0], targets.clone(), None, None), 1000);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn masked_cross_entropy_backward_matches_finite_differences() {
    let mut rng = rng_from_seed(3);
    let mut p = ParameterSet::new();
    p.push("logits", random(&[3, 6], 1.0, &mut rng));
    let mut targets = Tensor::zeros(&[3, 6]);
    targets.set2(0, 2, 1.0);
    targets.set2(1, 3, 1.0);
    targets.set2(2, 2, 1.0);
    let mask = vec![false, false, true, true, false, false];
    let err = check(
        &p,
        |g, v| g.cross_entropy(v[0], targets.clone(), Some(vec![0.2, 0.5, 0.3]), Some(mask.clone())),
        1000,
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn linear_squared_loss_is_exact() {
    let mut rng = rng_from_seed(4);
    let mut p = ParameterSet::new();
    p.push("w", random(&[6, 2], 0.5, &mut rng));
    p.push("b", random(&[2], 0.5, &mut rng));
    let x = random(&[8, 6], 1.0, &mut rng);
    let y = random(&[8, 2], 1.0, &mut rng).scale(-1.0);
    let err = check(
        &p,
        |g, v| {
            let xi = g.constant(x.clone());
            let h = g.matmul(xi, v[0])?;
            let h = g.add_bias(h, v[1])?;
            let r = g.add_const(h, &y)?;
            let s = g.square(r)?;
            let s = g.sum(s)?;
            g.scale(s, 1.0 / 8.0)
        },
        200,
    );
    assert!(err < 1e-8, "{err}");
}

#[test]
fn two_layer_relu_mlp_with_cross_entropy() {
    let mut rng = rng_from_seed(5);
    let mut p = ParameterSet::new();
    p.push("w1", random(&[12, 16], 0.4, &mut rng));
    p.push("b1", random(&[16], 0.1, &mut rng));
    p.push("w2", random(&[16, 16], 0.3, &mut rng));
    p.push("b2", random(&[16], 0.1, &mut rng));
    p.push("w3", random(&[16, 5], 0.3, &mut rng));
    p.push("b3", random(&[5], 0.1, &mut rng));
    let x = random(&[7, 12], 1.0, &mut rng);
    let t = one_hot_rows(7, 5, &mut rng);
    let err = check(
        &p,
        |g, v| {
            let mut h = g.constant(x.clone());
            for l in 0..2 {
                h = g.matmul(h, v[2 * l])?;
                h = g.add_bias(h, v[2 * l + 1])?;
                h = g.relu(h)?;
            }
            let o = g.matmul(h, v[4])?;
            let o = g.add_bias(o, v[5])?;
            g.cross_entropy(o, t.clone(), None, None)
        },
        400,
    );
    assert!(err < 1e-5, "{err}");
}

#[test]
fn lstm_unrolled_five_steps() {
    let mut rng = rng_from_seed(6);
    let (n_in, n, b) = (3, 4, 2);
    let mut p = ParameterSet::new();
    p.push("wx", random(&[n_in, 4 * n], 0.5, &mut rng));
    p.push("wh", random(&[n, 4 * n], 0.5, &mut rng));
    p.push("b", random(&[4 * n], 0.1, &mut rng));
    p.push("wo", random(&[n, 3], 0.5, &mut rng));
    let xs: Vec<Tensor> = (0..5).map(|_| random(&[b, n_in], 1.0, &mut rng)).collect();
    let t = one_hot_rows(b, 3, &mut rng);
    let err = check(
        &p,
        |g, v| {
            let mut h = g.constant(Tensor::zeros(&[b, n]));
            let mut c = g.constant(Tensor::zeros(&[b, n]));
            for x in &xs {
                let xi = g.constant(x.clone());
                let a = g.matmul(xi, v[0])?;
                let r = g.matmul(h, v[1])?;
                let z = g.add(a, r)?;
                let z = g.add_bias(z, v[2])?;
                let i = g.slice_cols(z, 0, n)?;
                let f = g.slice_cols(z, n, 2 * n)?;
                let o = g.slice_cols(z, 2 * n, 3 * n)?;
                let u = g.slice_cols(z, 3 * n, 4 * n)?;
                let (i, f, o, u) = (g.sigmoid(i)?, g.sigmoid(f)?, g.sigmoid(o)?, g.tanh(u)?);
                let fc = g.mul(f, c)?;
                let iu = g.mul(i, u)?;
                c = g.add(fc, iu)?;
                let tc = g.tanh(c)?;
                h = g.mul(o, tc)?;
            }
            let logits = g.matmul(h, v[3])?;
            g.cross_entropy(logits, t.clone(), None, None)
        },
        300,
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn forward_and_backward_are_bit_identical_across_runs() {
    let run = || {
        let mut rng = rng_from_seed(11);
        let mut p = ParameterSet::new();
        p.push("w", random(&[30, 20], 0.3, &mut rng));
        let x = random(&[9, 30], 1.0, &mut rng);
        let t = one_hot_rows(9, 20, &mut rng);
        eval(&p, &|g: &mut Graph, v: &[Var]| {
            let xi = g.constant(x.clone());
            let h = g.matmul(xi, v[0])?;
            let h = g.tanh(h)?;
            g.cross_entropy(h, t.clone(), None, None)
        })
        .unwrap()
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    LogSoftmax,
    Square,
    Scale,
}

fn apply(g: &mut Graph, op: Unary, x: Var) -> Result<Var> {
    match op {
        Unary::Relu => g.relu(x),
        Unary::Sigmoid => g.sigmoid(x),
        Unary::Tanh => g.tanh(x),
        Unary::Softmax => g.softmax(x),
        Unary::LogSoftmax => g.log_softmax(x),
        Unary::Square => g.square(x),
        Unary::Scale => g.scale(x, -1.5),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unary_ops_match_finite_differences(seed in 0u64..10_000, op in prop::sample::select(vec![
        Unary::Relu, Unary::Sigmoid, Unary::Tanh, Unary::Softmax, Unary::LogSoftmax, Unary::Square, Unary::Scale,
    ])) {
        let mut rng = rng_from_seed(seed);
        let mut p = ParameterSet::new();
        let mut x = random(&[3, 5], 1.0, &mut rng);
        if matches!(op, Unary::Relu) {
            // keep clear of the kink
            for v in x.data_mut() {
                if v.abs() < 1e-3 { *v += 0.01; }
            }
        }
        p.push("x", x);
        let w = random(&[3, 5], 1.0, &mut rng);
        let err = check(&p, |g, v| {
            let y = apply(g, op, v[0])?;
            let y = g.mul_const(y, w.clone())?;
            g.sum(y)
        }, 100);
        prop_assert!(err < 1e-5, "{op:?}: {err}");
    }

    #[test]
    fn binary_ops_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = rng_from_seed(seed);
        let mut p = ParameterSet::new();
        p.push("a", random(&[4, 6], 1.0, &mut rng));
        p.push("b", random(&[4, 6], 1.0, &mut rng));
        p.push("bias", random(&[6], 1.0, &mut rng));
        let mask: Vec<f64> = (0..6).map(|j| (j % 2) as f64).collect();
        let w = random(&[4, 3], 1.0, &mut rng);
        let err = check(&p, |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            let m = g.mul(s, d)?;
            let m = g.add_bias(m, v[2])?;
            let m = g.mul_row_const(m, mask.clone())?;
            let m = g.slice_cols(m, 1, 4)?;
            let m = g.mul_const(m, w.clone())?;
            g.sum(m)
        }, 100);
        prop_assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in 0u64..10_000, shift in -50.0f64..50.0) {
        let mut rng = rng_from_seed(seed);
        let x = random(&[4, 9], 3.0, &mut rng);
        let y = x.softmax_rows();
        for i in 0..4 {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = x.map(|v| v + shift).softmax_rows();
        for (a, b) in y.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn relative_error_uses_floor_for_tiny_gradients() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!(relative_error(0.0, 1e-11) < 1e-6);
    assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
}
