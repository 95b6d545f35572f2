use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigan_autodiff::{grad, no_grad, SeparableMap, Tensor, Var};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central differences of `f` at `x`, evaluated in `f64` on top of the
/// `f32` forward.
fn numeric_grad(x: &Tensor, eps: f32, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            (f(&plus) - f(&minus)) / (2.0 * eps as f64)
        })
        .collect()
}

fn rel_err(analytic: &Tensor, numeric: &[f64]) -> f64 {
    let num: f64 = analytic
        .data()
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-6);
    num / den
}

/// Checks d(sum(w ⊙ op(x)))/dx against finite differences.
fn check_unary(name: &str, x: Tensor, op: impl Fn(&Var) -> Var, eps: f32, tol: f64) {
    let probe = random(no_grad(|| op(&Var::constant(x.clone()))).shape(), 99);
    let probe = Rc::new(probe);
    let loss = |v: &Var| op(v).mul_const(probe.clone()).sum();
    let xv = Var::leaf(x.clone());
    let g = grad(&loss(&xv), &[&xv], false).remove(0);
    let numeric = numeric_grad(&x, eps, &|t| no_grad(|| loss(&Var::constant(t.clone())).item() as f64));
    let err = rel_err(g.value(), &numeric);
    assert!(err < tol, "{name}: relative gradient error {err}");
}

#[test]
fn elementwise_ops() {
    let x = random(&[2, 3, 4], 1);
    check_unary("tanh", x.clone(), |v| v.tanh(), 1e-2, 1e-3);
    check_unary("exp", x.clone(), |v| v.exp(), 1e-2, 1e-3);
    check_unary("square", x.clone(), |v| v.square(), 1e-2, 1e-3);
    check_unary("powf", x.map(|v| v.abs() + 0.5), |v| v.powf(-0.5), 1e-2, 1e-3);
    check_unary("leaky_relu", x.map(|v| if v.abs() < 0.05 { 0.3 } else { v }), |v| v.leaky_relu(0.2), 1e-2, 1e-3);
    check_unary("clamp", x.map(|v| v * 2.0), |v| v.clamp(-0.5, 0.5), 1e-3, 5e-2);
    check_unary("scale+add", x.clone(), |v| v.scale(3.0).add_scalar(1.0), 1e-2, 1e-3);
    check_unary("mul self", x.clone(), |v| v.mul(&v.tanh()), 1e-2, 1e-3);
}

#[test]
fn reduction_and_shape_ops() {
    let x = random(&[3, 4, 5], 2);
    check_unary("sum_inner/expand", x.clone(), |v| v.sum_inner(3).square().expand_inner(&[3, 4, 5]), 1e-2, 1e-3);
    check_unary("mean", x.clone(), |v| v.mean().square(), 1e-2, 1e-3);
    check_unary("l2_norm", x.clone(), |v| v.l2_norm(), 1e-2, 1e-3);
    check_unary("reshape/transpose", x.clone(), |v| v.reshape(&[3, 20]).transpose2d().tanh(), 1e-2, 1e-3);
    check_unary("softmax", x.clone(), |v| v.reshape(&[6, 10]).softmax_rows(), 1e-2, 1e-3);
    check_unary("slice", x.clone(), |v| v.slice_channels(1, 2).exp(), 1e-2, 1e-3);
    check_unary(
        "concat",
        x.clone(),
        |v| Var::concat_channels(&[&v.tanh(), &v.square()]),
        1e-2,
        1e-3,
    );
}

#[test]
fn linear_ops() {
    let x = random(&[3, 6, 5], 3);
    let w = Var::constant(random(&[4, 3, 3, 3], 4));
    check_unary("conv2d x", x.clone(), |v| v.conv2d(&w, 1), 1e-2, 1e-3);
    let xc = Var::constant(x.clone());
    check_unary("conv2d w", random(&[4, 3, 3, 3], 4), |v| xc.conv2d(v, 1).square(), 1e-2, 1e-3);
    let b = Var::constant(random(&[5, 7], 5));
    check_unary("matmul lhs", random(&[4, 5], 6), |v| v.matmul(&b), 1e-2, 1e-3);
    check_unary("matmul rhs", random(&[5, 7], 7), |v| Var::constant(random(&[4, 5], 6)).matmul(v).square(), 1e-2, 1e-3);
    let map = SeparableMap::new(random(&[4, 6], 8), random(&[9, 5], 9));
    check_unary("separable", x, |v| v.separable(&map).square(), 1e-2, 1e-3);
}

/// Critic: conv -> leaky relu -> conv, reduced to a scalar mean.
fn tiny_critic(x: &Var, w1: &Var, w2: &Var) -> Var {
    x.conv2d(w1, 1).tanh().conv2d(w2, 1).mean()
}

/// The penalty-style objective ||∇ₓ D||² must differentiate correctly with
/// respect to the critic weights; this exercises every double-backward rule
/// on the conv/tanh path.
#[test]
fn double_backward_through_conv_stack() {
    let x = random(&[2, 5, 5], 10);
    let w1 = random(&[3, 2, 3, 3], 11);
    let w2 = random(&[1, 3, 3, 3], 12);
    let penalty = |w1t: &Tensor, create: bool| {
        let xv = Var::leaf(x.clone());
        let w1v = Var::leaf(w1t.clone());
        let w2v = Var::constant(w2.clone());
        let d = tiny_critic(&xv, &w1v, &w2v);
        let gx = grad(&d, &[&xv], create).remove(0);
        (gx.l2_norm().add_scalar(-1.0).square(), w1v)
    };
    let (p, w1v) = penalty(&w1, true);
    let analytic = grad(&p, &[&w1v], false).remove(0);
    let numeric = numeric_grad(&w1, 1e-2, &|t| penalty(t, false).0.item() as f64);
    let err = rel_err(analytic.value(), &numeric);
    assert!(err < 1e-2, "double-backward relative error {err}");
}

#[test]
fn double_backward_through_softmax_and_matmul() {
    let a = random(&[4, 3], 20);
    let b = random(&[3, 4], 21);
    let objective = |at: &Tensor, create: bool| {
        let av = Var::leaf(at.clone());
        let xv = Var::leaf(b.clone());
        let s = av.matmul(&xv).softmax_rows().square().sum();
        let gx = grad(&s, &[&xv], create).remove(0);
        (gx.square().sum(), av)
    };
    let (p, av) = objective(&a, true);
    let analytic = grad(&p, &[&av], false).remove(0);
    let numeric = numeric_grad(&a, 1e-2, &|t| objective(t, false).0.item() as f64);
    let err = rel_err(analytic.value(), &numeric);
    assert!(err < 1e-2, "double-backward relative error {err}");
}

#[test]
fn unreachable_inputs_get_zero_gradient() {
    let x = Var::leaf(Tensor::ones(&[2]));
    let y = Var::leaf(Tensor::ones(&[3]));
    let out = x.sum();
    let gs = grad(&out, &[&x, &y], false);
    assert_eq!(gs[0].value().data(), &[1.0, 1.0]);
    assert_eq!(gs[1].value().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn no_grad_records_nothing() {
    let x = Var::leaf(Tensor::ones(&[2]));
    let y = no_grad(|| x.tanh());
    assert!(!y.requires_grad());
    assert!(x.tanh().requires_grad());
}

#[test]
fn gradients_accumulate_over_shared_uses() {
    let x = Var::leaf(Tensor::new(&[1], vec![3.0]));
    let y = x.mul(&x).add(&x.scale(2.0));
    let g = grad(&y, &[&x], false).remove(0);
    assert_eq!(g.value().data(), &[8.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(vals in proptest::collection::vec(-20.0f32..20.0, 12)) {
        let s = Var::constant(Tensor::new(&[3, 4], vals)).softmax_rows();
        for row in s.value().data().chunks(4) {
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
