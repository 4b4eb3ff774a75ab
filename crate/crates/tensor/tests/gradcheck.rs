use gwnet_tensor::ops;
use gwnet_tensor::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

fn check(name: &str, f: impl Fn(&[Var]) -> Var, inputs: &[Tensor], tol: f64) {
    let r = grad_check(f, inputs, STEP).unwrap();
    assert!(r.passed(tol), "{name}: max rel error {} at {:?} ({} vs {})", r.max_rel_error, r.worst, r.analytic, r.numeric);
}

#[test]
fn conv2d_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [
        random(Shape::new(1, 2, 6, 6), &mut rng),
        random(Shape::new(3, 2, 5, 5), &mut rng),
        random(Shape::new(1, 3, 1, 1), &mut rng),
    ];
    check(
        "conv2d",
        |v| conv2d(&v[0], &ConvSpec::new(v[1].clone(), Some(v[2].clone()), 2, 2)).unwrap(),
        &inputs,
        1e-4,
    );
}

#[test]
fn deconv2d_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(Shape::new(2, 3, 2, 2), &mut rng), random(Shape::new(3, 2, 5, 5), &mut rng)];
    check("deconv2d", |v| deconv2d(&v[0], &ConvSpec::new(v[1].clone(), None, 2, 2)).unwrap(), &inputs, 1e-4);
}

#[test]
fn conv_weight_grad_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(Shape::new(2, 2, 5, 5), &mut rng), random(Shape::new(2, 3, 3, 3), &mut rng)];
    check("conv2d_weight_grad", |v| ops::conv2d_weight_grad(&v[0], &v[1], (5, 5), 2, 2).unwrap(), &inputs, 1e-4);
}

#[test]
fn adain_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random(Shape::new(1, 2, 3, 3), &mut rng), random(Shape::new(1, 2, 3, 3), &mut rng)];
    check("adain", |v| adain(&v[0], &v[1], DEFAULT_EPS).unwrap(), &inputs, 1e-4);
}

#[test]
fn tanh_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check("tanh", |v| activation(&v[0], Activation::Tanh), &[random(Shape::new(1, 2, 3, 3), &mut rng)], 1e-6);
}

#[test]
fn piecewise_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // keep away from the kink
    let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { v } else { -v }
    });
    check("relu", |v| activation(&v[0], Activation::Relu), std::slice::from_ref(&x), 1e-6);
    check("leaky_relu", |v| activation(&v[0], Activation::LeakyRelu(0.2)), std::slice::from_ref(&x), 1e-6);
    check("abs", |v| ops::abs(&v[0]), &[x], 1e-6);
}

#[test]
fn normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [
        random(Shape::new(2, 3, 3, 3), &mut rng),
        random(Shape::new(1, 3, 1, 1), &mut rng),
        random(Shape::new(1, 3, 1, 1), &mut rng),
    ];
    for kind in [NormKind::Batch, NormKind::Instance, NormKind::Layer] {
        check(
            &format!("{kind:?} norm"),
            |v| normalize(&v[0], kind, &v[1], &v[2], DEFAULT_EPS).unwrap(),
            &inputs,
            1e-4,
        );
    }
}

#[test]
fn elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(Shape::new(2, 3, 2, 2), &mut rng);
    let b = positive(Shape::new(1, 3, 1, 1), &mut rng);
    let p = positive(Shape::new(2, 3, 2, 2), &mut rng);
    check("add/mul/div broadcast", |v| &(&(&v[0] + &v[1]) * &v[0]) / &v[1], &[a.clone(), b.clone()], 1e-4);
    check("sub", |v| &v[0] - &v[1], &[a.clone(), b.clone()], 1e-6);
    check("exp/ln/sqrt", |v| ops::sqrt(&ops::ln(&(ops::exp(&v[0]) + 1.0))), std::slice::from_ref(&a), 1e-4);
    check("ln positive", |v| ops::ln(&v[0]), std::slice::from_ref(&p), 1e-4);
    check("mean_to", |v| ops::mean_to(&ops::square(&v[0]), Shape::new(2, 1, 1, 1)), std::slice::from_ref(&a), 1e-4);
    check("broadcast_to", |v| ops::broadcast_to(&v[0], Shape::new(2, 3, 2, 2)), &[b], 1e-6);
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(Shape::new(2, 1, 3, 3), &mut rng);
    let b = random(Shape::new(2, 2, 3, 3), &mut rng);
    check(
        "concat+slice",
        |v| ops::slice_channels(&channel_concat(&[v[0].clone(), v[1].clone()]).unwrap(), 1, 2),
        &[a.clone(), b.clone()],
        1e-6,
    );
    check("batch concat", |v| ops::concat_batch(&[v[0].clone(), v[0].clone()]).unwrap(), std::slice::from_ref(&a), 1e-6);
    check("transpose+reshape", |v| ops::reshape(&ops::transpose_hw(&v[0]), Shape::new(1, 1, 6, 3)).unwrap(), &[a], 1e-6);
    let m1 = random(Shape::new(2, 1, 3, 4), &mut rng);
    let m2 = random(Shape::new(2, 1, 4, 2), &mut rng);
    check("matmul", |v| ops::matmul(&v[0], &v[1]).unwrap(), &[m1, m2], 1e-4);
}

#[test]
fn pooling_and_set_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(Shape::new(1, 2, 4, 4), &mut rng);
    check("max_pool2", |v| ops::max_pool2(&v[0]), &[x], 1e-6);
    let xs = [
        random(Shape::new(2, 2, 2, 2), &mut rng),
        random(Shape::new(2, 2, 2, 2), &mut rng),
        random(Shape::new(2, 2, 2, 2), &mut rng),
    ];
    for mode in [ReduceMode::Avg, ReduceMode::Max, ReduceMode::Min] {
        check(&format!("set_reduce {mode:?}"), |v| set_reduce(v, mode).unwrap(), &xs, 1e-6);
    }
    let y = random(Shape::new(3, 2, 2, 2), &mut rng);
    check(
        "segment_reduce avg",
        |v| segment_reduce(&v[0], &[vec![0, 2], vec![1]], ReduceMode::Avg).unwrap(),
        &[y],
        1e-6,
    );
}

/// Second-order: the gradient of `‖∇ₓ g‖²` with respect to both the input
/// and the parameters, for a layer-normed leaky-ReLU conv critic.
#[test]
fn double_backward_through_conv_critic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [
        random(Shape::new(2, 1, 6, 6), &mut rng),
        random(Shape::new(3, 1, 5, 5), &mut rng),
        positive(Shape::new(1, 3, 1, 1), &mut rng),
        random(Shape::new(1, 3, 1, 1), &mut rng),
        random(Shape::new(1, 3, 2, 2), &mut rng),
    ];
    let critic = |x: &Var, v: &[Var]| -> Var {
        let h = conv2d(x, &ConvSpec::new(v[1].clone(), None, 2, 2)).unwrap();
        let h = normalize(&h, NormKind::Layer, &v[2], &v[3], DEFAULT_EPS).unwrap();
        let h = activation(&h, Activation::LeakyRelu(0.2));
        // keep the ReLU kink away: it only changes the mask
        let h = ops::conv2d_weight_grad(&h, &ops::tanh(&h), (1, 1), 1, 0).unwrap();
        ops::sum_all(&ops::mul(&h, &ops::sum_to(&v[4], Shape::new(1, 3, 1, 1))))
    };
    let f = |v: &[Var]| -> Var {
        let (_, g) = input_gradient(|x| critic(x, v), &v[0]).unwrap();
        ops::sum_all(&ops::square(&g))
    };
    let r = grad_check(f, &inputs, STEP).unwrap();
    assert!(r.passed(1e-4), "double backward: {:?}", r);
}

#[test]
fn double_backward_through_deconv_and_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = [random(Shape::new(1, 2, 2, 2), &mut rng), random(Shape::new(2, 1, 5, 5), &mut rng)];
    let f = |v: &[Var]| -> Var {
        let (_, g) = input_gradient(
            |x| {
                let y = deconv2d(x, &ConvSpec::new(v[1].clone(), None, 2, 2)).unwrap();
                ops::sum_all(&ops::tanh(&ops::max_pool2(&y)))
            },
            &v[0],
        )
        .unwrap();
        ops::sum_all(&ops::square(&g))
    };
    let r = grad_check(f, &inputs, STEP).unwrap();
    assert!(r.passed(1e-4), "{:?}", r);
}

#[test]
fn broken_backward_is_detected() {
    // An op whose backward rule is off by a factor two.
    let bad = |v: &[Var]| -> Var {
        let out = v[0].value().map(|x| x * x);
        ops::record("bad_square", out, vec![v[0].clone()], |i, _, g| vec![Some(ops::mul(g, &i[0]))])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let r = grad_check(bad, &[random(Shape::new(1, 1, 2, 2), &mut rng)], STEP).unwrap();
    assert!(!r.passed(1e-4));
}
