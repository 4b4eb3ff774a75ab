//! Layer-level ops built from the primitives: biased convolutions,
//! activations, normalizations, AdaIN, set reductions and input gradients.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::ops::{self, conv_transpose_out_len, Segments};
use crate::tensor::{Shape, Tensor};
use crate::var::{grad, Var};

/// Default ε for every normalization and for AdaIN.
pub const DEFAULT_EPS: f64 = 1e-5;

/// A convolution layer's parameters: kernel `(out_ch, in_ch, kh, kw)`,
/// optional bias of `out_ch` entries, stride and zero padding.
#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub kernel: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Self {
        ConvSpec { kernel, bias, stride, padding }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().0[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape().0[1]
    }

    fn add_bias(&self, y: Var, channels: usize) -> Result<Var> {
        match &self.bias {
            None => Ok(y),
            Some(b) => {
                if b.shape() != Shape::new(1, channels, 1, 1) {
                    return Err(TensorError::shape(
                        "conv bias",
                        format!("bias shape {} but {channels} output channels", b.shape()),
                    ));
                }
                Ok(&y + b)
            }
        }
    }
}

/// Strided convolution plus bias. Output spatial size is
/// `floor((H + 2·pad − k)/stride) + 1`.
pub fn conv2d(x: &Var, spec: &ConvSpec) -> Result<Var> {
    let y = ops::conv2d_raw(x, &spec.kernel, spec.stride, spec.padding)?;
    spec.add_bias(y, spec.out_channels())
}

/// Transposed convolution plus bias; inverts the sizing of [`conv2d`] with
/// the same spec. The kernel keeps the forward layout, so the input must
/// carry `spec.out_channels()` channels and the output has
/// `spec.in_channels()`.
pub fn deconv2d(x: &Var, spec: &ConvSpec) -> Result<Var> {
    let [kco, kci, kh, kw] = spec.kernel.shape().0;
    if x.shape().c() != kco {
        return Err(TensorError::shape(
            "deconv2d",
            format!("input channel dim is {} but kernel expects {kco}", x.shape().c()),
        ));
    }
    let h = conv_transpose_out_len(x.shape().h(), kh, spec.stride, spec.padding);
    let w = conv_transpose_out_len(x.shape().w(), kw, spec.stride, spec.padding);
    let y = ops::conv_transpose2d_raw(x, &spec.kernel, spec.stride, spec.padding, (h, w))?;
    spec.add_bias(y, kci)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

pub fn activation(x: &Var, kind: Activation) -> Var {
    match kind {
        Activation::Relu => ops::relu(x),
        Activation::LeakyRelu(s) => ops::leaky_relu(x, s),
        Activation::Tanh => ops::tanh(x),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    /// Per channel over (N, H, W).
    Batch,
    /// Per (n, c) over (H, W).
    Instance,
    /// Per n over (C, H, W).
    Layer,
}

impl NormKind {
    pub fn stat_shape(&self, x: Shape) -> Shape {
        let [n, c, _, _] = x.0;
        match self {
            NormKind::Batch => Shape::new(1, c, 1, 1),
            NormKind::Instance => Shape::new(n, c, 1, 1),
            NormKind::Layer => Shape::new(n, 1, 1, 1),
        }
    }
}

/// Batch statistics used by a normalization, for running-average updates.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Tensor,
    /// Biased (population) variance.
    pub var: Tensor,
}

/// `(x − μ)/sqrt(var + ε)` with statistics over the dims `stat` collapses.
pub fn standardize(x: &Var, stat: Shape, eps: f64) -> (Var, NormStats) {
    let mu = ops::mean_to(x, stat);
    let centered = x - &mu;
    let var = ops::mean_to(&ops::square(&centered), stat);
    let sigma = ops::sqrt(&(&var + eps));
    let stats = NormStats { mean: mu.value().clone(), var: var.value().clone() };
    (&centered / &sigma, stats)
}

fn check_affine(x: &Var, gamma: &Var, beta: &Var) -> Result<()> {
    let want = Shape::new(1, x.shape().c(), 1, 1);
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if p.shape() != want {
            return Err(TensorError::shape("normalize", format!("{name} has shape {} but expected {want}", p.shape())));
        }
    }
    Ok(())
}

/// Normalization with statistics from `x` itself, followed by the affine
/// map `γ·x̂ + β`. Returns the statistics so batch norm can update its
/// running averages.
pub fn normalize_with_stats(x: &Var, kind: NormKind, gamma: &Var, beta: &Var, eps: f64) -> Result<(Var, NormStats)> {
    if eps <= 0.0 {
        return Err(TensorError::invalid("normalize", format!("eps must be positive, got {eps}")));
    }
    check_affine(x, gamma, beta)?;
    let (xhat, stats) = standardize(x, kind.stat_shape(x.shape()), eps);
    Ok((&(&xhat * gamma) + beta, stats))
}

pub fn normalize(x: &Var, kind: NormKind, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
    normalize_with_stats(x, kind, gamma, beta, eps).map(|(y, _)| y)
}

/// Inference-mode batch norm using stored running statistics.
pub fn batch_norm_eval(x: &Var, gamma: &Var, beta: &Var, mean: &Tensor, var: &Tensor, eps: f64) -> Result<Var> {
    check_affine(x, gamma, beta)?;
    let inv = var.map(|v| 1.0 / (v + eps).sqrt());
    let centered = x - &Var::constant(mean.clone());
    Ok(&(&ops::mul_const(&centered, &inv) * gamma) + beta)
}

/// Adaptive instance normalization: re-normalizes `content` to the
/// per-(n, c) spatial mean and standard deviation of `style`, where
/// `σ = sqrt(var + ε)`.
///
/// Computed as `content·s + (μ_style − μ_content·s)` with
/// `s = σ_style/σ_content`, so identical statistics give back `content`
/// bit for bit.
pub fn adain(content: &Var, style: &Var, eps: f64) -> Result<Var> {
    let (cs, ss) = (content.shape(), style.shape());
    if cs.n() != ss.n() || cs.c() != ss.c() {
        return Err(TensorError::shape(
            "adain",
            format!("content {cs} and style {ss} must share batch and channel dims"),
        ));
    }
    let stat = Shape::new(cs.n(), cs.c(), 1, 1);
    let moments = |x: &Var| {
        let mu = ops::mean_to(x, stat);
        let var = ops::mean_to(&ops::square(&(x - &mu)), stat);
        (ops::sqrt(&(&var + eps)), mu)
    };
    let (sig_c, mu_c) = moments(content);
    let (sig_s, mu_s) = moments(style);
    let gain = &sig_s / &sig_c;
    let shift = &mu_s - &(&mu_c * &gain);
    Ok(&(content * &gain) + &shift)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceMode {
    Avg,
    Max,
    Min,
}

/// Reduces groups of batch rows elementwise. Row `groups[s]` feed output
/// row `s`. Averages are summed exactly, so the result does not depend on
/// the order of rows within a group; max/min route gradient to the first
/// achieving row of the group.
pub fn segment_reduce(x: &Var, groups: &[Vec<usize>], mode: ReduceMode) -> Result<Var> {
    let n = x.shape().n();
    for (s, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(TensorError::invalid("set_reduce", format!("group {s} is empty")));
        }
        if let Some(&r) = g.iter().find(|&&r| r >= n) {
            return Err(TensorError::invalid("set_reduce", format!("row {r} out of range for batch {n}")));
        }
    }
    match mode {
        ReduceMode::Avg => {
            let weights = groups.iter().map(|g| 1.0 / g.len() as f64).collect();
            let seg = Segments { rows: groups.to_vec(), weights };
            Ok(ops::segment_sum(x, Rc::new(seg)))
        }
        ReduceMode::Max | ReduceMode::Min => {
            let [_, c, h, w] = x.shape().0;
            let row = c * h * w;
            let src = x.value().data();
            let better = |a: f64, b: f64| if mode == ReduceMode::Max { a > b } else { a < b };
            let mut index = Vec::with_capacity(groups.len() * row);
            for g in groups {
                for e in 0..row {
                    let mut best = g[0] * row + e;
                    for &r in &g[1..] {
                        let k = r * row + e;
                        if better(src[k], src[best]) {
                            best = k;
                        }
                    }
                    index.push(best);
                }
            }
            Ok(ops::index_gather(x, Rc::new(index), Shape::new(groups.len(), c, h, w)))
        }
    }
}

/// Elementwise reduction across a list of same-shaped tensors.
pub fn set_reduce(xs: &[Var], mode: ReduceMode) -> Result<Var> {
    let first = xs.first().ok_or_else(|| TensorError::invalid("set_reduce", "empty list"))?.shape();
    if let Some(bad) = xs.iter().find(|x| x.shape() != first) {
        return Err(TensorError::shape("set_reduce", format!("{} vs {}", bad.shape(), first)));
    }
    let n = first.n();
    let stacked = ops::concat_batch(xs)?;
    let groups: Vec<Vec<usize>> = (0..n).map(|b| (0..xs.len()).map(|k| k * n + b).collect()).collect();
    segment_reduce(&stacked, &groups, mode)
}

pub fn channel_concat(xs: &[Var]) -> Result<Var> {
    ops::concat_channels(xs)
}

/// `(1 − u)·a + u·b`.
pub fn interpolate_uniform(a: &Var, b: &Var, u: f64) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape("interpolate_uniform", format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(&(a * (1.0 - u)) + &(b * u))
}

/// Per-sample interpolation with one `u` per batch row.
pub fn interpolate_per_sample(a: &Var, b: &Var, u: &[f64]) -> Result<Var> {
    if a.shape() != b.shape() || u.len() != a.shape().n() {
        return Err(TensorError::shape(
            "interpolate_uniform",
            format!("{} vs {} with {} weights", a.shape(), b.shape(), u.len()),
        ));
    }
    let ut = Tensor::new(Shape::new(u.len(), 1, 1, 1), u.to_vec())?;
    let one_minus = ut.map(|v| 1.0 - v);
    Ok(&ops::mul_const(a, &one_minus) + &ops::mul_const(b, &ut))
}

/// `∇ₓ f(x)` as a graph node that can itself be differentiated, e.g. with
/// respect to parameters used inside `f`.
///
/// A constant `x` is promoted to a leaf first. Returns `(x_used, grad)`.
pub fn input_gradient(f: impl FnOnce(&Var) -> Var, x: &Var) -> Result<(Var, Var)> {
    let xv = if x.requires_grad() { x.clone() } else { Var::leaf(x.value().clone()) };
    let y = f(&xv);
    if y.shape().numel() != 1 {
        return Err(TensorError::NonScalar(y.shape()));
    }
    let g = grad(&y, &[&xv], true)?
        .pop()
        .flatten()
        .unwrap_or_else(|| Var::constant(Tensor::zeros(xv.shape())));
    Ok((xv, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Var {
        Var::constant(Tensor::new(shape, data.to_vec()).unwrap())
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Var::constant(Tensor::zeros(Shape::new(1, 2, 6, 6)));
        let spec = ConvSpec::new(
            Var::constant(Tensor::full(Shape::new(3, 2, 5, 5), 0.7)),
            Some(t(Shape::new(1, 3, 1, 1), &[0.5, -1.0, 2.0])),
            2,
            2,
        );
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 3, 3));
        for c in 0..3 {
            for p in 0..9 {
                assert_eq!(y.value().data()[c * 9 + p], [0.5, -1.0, 2.0][c]);
            }
        }
    }

    #[test]
    fn ones_conv_matches_window_counts() {
        // 4x4 ones, 5x5 ones kernel, pad 2, stride 2: each output counts the
        // in-bounds cells of its window.
        let x = Var::constant(Tensor::full(Shape::new(1, 1, 4, 4), 1.0));
        let spec = ConvSpec::new(Var::constant(Tensor::full(Shape::new(1, 1, 5, 5), 1.0)), None, 2, 2);
        let y = conv2d(&x, &spec).unwrap();
        let mut oracle = [0.0; 4];
        for oy in 0..2 {
            for ox in 0..2 {
                let mut acc = 0.0;
                for ky in 0..5 {
                    for kx in 0..5 {
                        let (iy, ix) = (oy as i32 * 2 + ky - 2, ox as i32 * 2 + kx - 2);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += 1.0;
                        }
                    }
                }
                oracle[oy as usize * 2 + ox as usize] = acc;
            }
        }
        assert_eq!(y.value().data(), &oracle);
        assert_eq!(oracle, [9.0, 12.0, 12.0, 16.0]);
    }

    #[test]
    fn conv_reports_offending_dim() {
        let x = Var::constant(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        let spec = ConvSpec::new(Var::constant(Tensor::zeros(Shape::new(2, 1, 5, 5))), None, 2, 2);
        let err = conv2d(&x, &spec).unwrap_err().to_string();
        assert!(err.contains("3 channels"), "{err}");
        let small = Var::constant(Tensor::zeros(Shape::new(1, 1, 2, 8)));
        let spec = ConvSpec::new(Var::constant(Tensor::zeros(Shape::new(1, 1, 5, 5))), None, 1, 0);
        assert!(conv2d(&small, &spec).unwrap_err().to_string().contains("height"));
    }

    #[test]
    fn activations() {
        let x = t(Shape::new(1, 1, 1, 2), &[-1.0, 2.0]);
        assert_eq!(activation(&x, Activation::Relu).value().data(), &[0.0, 2.0]);
        assert_eq!(activation(&x, Activation::LeakyRelu(0.2)).value().data(), &[-0.2, 2.0]);
        let th = activation(&x, Activation::Tanh);
        assert!(th.value().data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn constant_input_normalizes_to_shift() {
        let x = Var::constant(Tensor::full(Shape::new(2, 3, 4, 4), 5.0));
        let g = Var::constant(Tensor::full(Shape::new(1, 3, 1, 1), 1.0));
        let b = Var::constant(Tensor::full(Shape::new(1, 3, 1, 1), 0.25));
        for kind in [NormKind::Batch, NormKind::Instance, NormKind::Layer] {
            let y = normalize(&x, kind, &g, &b, DEFAULT_EPS).unwrap();
            assert!(y.value().data().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn empty_set_rejected() {
        assert!(set_reduce(&[], ReduceMode::Avg).is_err());
    }

    #[test]
    fn interpolation_endpoints() {
        let a = t(Shape::new(1, 1, 1, 3), &[0.0, 0.0, 0.0]);
        let b = t(Shape::new(1, 1, 1, 3), &[2.0, 2.0, 2.0]);
        assert_eq!(interpolate_uniform(&a, &b, 0.0).unwrap().value(), a.value());
        assert_eq!(interpolate_uniform(&a, &b, 1.0).unwrap().value(), b.value());
        assert_eq!(interpolate_uniform(&a, &b, 0.5).unwrap().value().data(), &[1.0, 1.0, 1.0]);
        let c = t(Shape::new(1, 1, 1, 2), &[0.0, 0.0]);
        assert!(interpolate_uniform(&a, &c, 0.5).is_err());
    }
}
