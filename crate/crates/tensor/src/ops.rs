//! Differentiable primitives.
//!
//! Elementwise arithmetic panics on incompatible shapes (a programming
//! error inside model code); ops with user-facing preconditions return
//! [`Result`].

use std::ops;
use std::rc::Rc;

use crate::conv::{self, conv_out_len};
use crate::error::{Result, TensorError};
use crate::tensor::{exact_sum, Shape, Tensor};
use crate::var::{GradFn, Var};

struct FnGrad<F> {
    name: &'static str,
    inputs: Vec<Var>,
    f: F,
}

impl<F> GradFn for FnGrad<F>
where
    F: Fn(&[Var], &Var, &Var) -> Vec<Option<Var>>,
{
    fn name(&self) -> &'static str {
        self.name
    }
    fn inputs(&self) -> Vec<Var> {
        self.inputs.clone()
    }
    fn backward(&self, out: &Var, grad: &Var) -> Vec<Option<Var>> {
        (self.f)(&self.inputs, out, grad)
    }
}

/// Records `value` as the output of an op whose backward rule is `f`.
pub fn record<F>(name: &'static str, value: Tensor, inputs: Vec<Var>, f: F) -> Var
where
    F: Fn(&[Var], &Var, &Var) -> Vec<Option<Var>> + 'static,
{
    Var::from_op(value, FnGrad { name, inputs, f })
}

fn when(v: &Var, f: impl FnOnce() -> Var) -> Option<Var> {
    v.requires_grad().then(f)
}

// ---------------------------------------------------------------- elementwise

fn binary(name: &'static str, a: &Var, b: &Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.value()
        .zip_broadcast(b.value(), f)
        .unwrap_or_else(|| panic!("{name}: cannot broadcast {} with {}", a.shape(), b.shape()))
}

pub fn add(a: &Var, b: &Var) -> Var {
    let v = binary("add", a, b, |x, y| x + y);
    let (sa, sb) = (a.shape(), b.shape());
    record("add", v, vec![a.clone(), b.clone()], move |i, _, g| {
        vec![when(&i[0], || sum_to(g, sa)), when(&i[1], || sum_to(g, sb))]
    })
}

pub fn sub(a: &Var, b: &Var) -> Var {
    let v = binary("sub", a, b, |x, y| x - y);
    let (sa, sb) = (a.shape(), b.shape());
    record("sub", v, vec![a.clone(), b.clone()], move |i, _, g| {
        vec![when(&i[0], || sum_to(g, sa)), when(&i[1], || neg(&sum_to(g, sb)))]
    })
}

pub fn mul(a: &Var, b: &Var) -> Var {
    let v = binary("mul", a, b, |x, y| x * y);
    let (sa, sb) = (a.shape(), b.shape());
    record("mul", v, vec![a.clone(), b.clone()], move |i, _, g| {
        vec![
            when(&i[0], || sum_to(&mul(g, &i[1]), sa)),
            when(&i[1], || sum_to(&mul(g, &i[0]), sb)),
        ]
    })
}

pub fn div(a: &Var, b: &Var) -> Var {
    let v = binary("div", a, b, |x, y| x / y);
    let (sa, sb) = (a.shape(), b.shape());
    record("div", v, vec![a.clone(), b.clone()], move |i, _, g| {
        vec![
            when(&i[0], || sum_to(&div(g, &i[1]), sa)),
            when(&i[1], || neg(&sum_to(&div(&mul(g, &i[0]), &square(&i[1])), sb))),
        ]
    })
}

pub fn neg(a: &Var) -> Var {
    record("neg", a.value().map(|x| -x), vec![a.clone()], |_, _, g| vec![Some(neg(g))])
}

pub fn scale(a: &Var, c: f64) -> Var {
    record("scale", a.value().map(|x| x * c), vec![a.clone()], move |_, _, g| vec![Some(scale(g, c))])
}

pub fn add_scalar(a: &Var, c: f64) -> Var {
    record("add_scalar", a.value().map(|x| x + c), vec![a.clone()], |_, _, g| vec![Some(g.clone())])
}

pub fn square(a: &Var) -> Var {
    record("square", a.value().map(|x| x * x), vec![a.clone()], |i, _, g| {
        vec![Some(scale(&mul(g, &i[0]), 2.0))]
    })
}

pub fn exp(a: &Var) -> Var {
    record("exp", a.value().map(f64::exp), vec![a.clone()], |_, out, g| vec![Some(mul(g, out))])
}

pub fn ln(a: &Var) -> Var {
    record("ln", a.value().map(f64::ln), vec![a.clone()], |i, _, g| vec![Some(div(g, &i[0]))])
}

pub fn sqrt(a: &Var) -> Var {
    record("sqrt", a.value().map(f64::sqrt), vec![a.clone()], |_, out, g| {
        vec![Some(scale(&div(g, out), 0.5))]
    })
}

pub fn tanh(a: &Var) -> Var {
    record("tanh", a.value().map(f64::tanh), vec![a.clone()], |_, out, g| {
        let one_minus = add_scalar(&neg(&square(out)), 1.0);
        vec![Some(mul(g, &one_minus))]
    })
}

/// Multiplies by a constant tensor (broadcast allowed).
pub fn mul_const(a: &Var, c: &Tensor) -> Var {
    mul(a, &Var::constant(c.clone()))
}

/// `x` where `x > 0`, `slope·x` elsewhere. The derivative is piecewise
/// constant, so the backward rule is a constant mask.
pub fn leaky_relu(a: &Var, slope: f64) -> Var {
    let v = a.value().map(|x| if x > 0.0 { x } else { slope * x });
    let mask = a.value().map(|x| if x > 0.0 { 1.0 } else { slope });
    record("leaky_relu", v, vec![a.clone()], move |_, _, g| vec![Some(mul_const(g, &mask))])
}

pub fn relu(a: &Var) -> Var {
    let v = a.value().map(|x| x.max(0.0));
    let mask = a.value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
    record("relu", v, vec![a.clone()], move |_, _, g| vec![Some(mul_const(g, &mask))])
}

pub fn abs(a: &Var) -> Var {
    let v = a.value().map(f64::abs);
    let sign = a.value().map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
    record("abs", v, vec![a.clone()], move |_, _, g| vec![Some(mul_const(g, &sign))])
}

// ----------------------------------------------------------------- reductions

pub fn sum_to(a: &Var, target: Shape) -> Var {
    if a.shape() == target {
        return a.clone();
    }
    let src = a.shape();
    record("sum_to", a.value().sum_to(target), vec![a.clone()], move |_, _, g| {
        vec![Some(broadcast_to(g, src))]
    })
}

pub fn broadcast_to(a: &Var, target: Shape) -> Var {
    if a.shape() == target {
        return a.clone();
    }
    let src = a.shape();
    record("broadcast_to", a.value().broadcast_to(target), vec![a.clone()], move |_, _, g| {
        vec![Some(sum_to(g, src))]
    })
}

pub fn sum_all(a: &Var) -> Var {
    sum_to(a, Shape::SCALAR)
}

pub fn mean_all(a: &Var) -> Var {
    let n = a.shape().numel() as f64;
    scale(&sum_all(a), 1.0 / n)
}

/// Mean over the dims that `target` collapses to 1.
pub fn mean_to(a: &Var, target: Shape) -> Var {
    let count = a.shape().numel() / target.numel();
    scale(&sum_to(a, target), 1.0 / count as f64)
}

// ------------------------------------------------------------ shape plumbing

pub fn reshape(a: &Var, shape: Shape) -> Result<Var> {
    if shape.numel() != a.shape().numel() {
        return Err(TensorError::shape("reshape", format!("{} -> {}", a.shape(), shape)));
    }
    let src = a.shape();
    let v = a.value().reshape(shape)?;
    Ok(record("reshape", v, vec![a.clone()], move |_, _, g| {
        vec![Some(reshape(g, src).expect("reshape back"))]
    }))
}

/// Swaps the H and W dims.
pub fn transpose_hw(a: &Var) -> Var {
    let [n, c, h, w] = a.shape().0;
    let src = a.value();
    let v = Tensor::from_fn(Shape::new(n, c, w, h), |[i, j, y, x]| src.at([i, j, x, y]));
    record("transpose_hw", v, vec![a.clone()], |_, _, g| vec![Some(transpose_hw(g))])
}

fn axis_split(shape: &Shape, axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape.0[..axis].iter().product();
    let inner: usize = shape.0[axis + 1..].iter().product();
    (outer, shape.0[axis], inner)
}

fn concat_axis(name: &'static str, xs: &[Var], axis: usize) -> Result<Var> {
    let first = xs.first().ok_or_else(|| TensorError::invalid(name, "empty input list"))?.shape();
    for (k, x) in xs.iter().enumerate() {
        for d in 0..4 {
            if d != axis && x.shape().0[d] != first.0[d] {
                let dim = ["batch", "channel", "height", "width"][d];
                return Err(TensorError::shape(
                    name,
                    format!("input {k} has {dim} {} but input 0 has {}", x.shape().0[d], first.0[d]),
                ));
            }
        }
    }
    let total: usize = xs.iter().map(|x| x.shape().0[axis]).sum();
    let mut out_shape = first;
    out_shape.0[axis] = total;
    let (outer, _, inner) = axis_split(&first, axis);
    let mut data = Vec::with_capacity(out_shape.numel());
    for o in 0..outer {
        for x in xs {
            let len = x.shape().0[axis] * inner;
            data.extend_from_slice(&x.value().data()[o * len..(o + 1) * len]);
        }
    }
    let offsets: Vec<(usize, usize)> = {
        let mut off = 0;
        xs.iter()
            .map(|x| {
                let l = x.shape().0[axis];
                let r = (off, l);
                off += l;
                r
            })
            .collect()
    };
    let v = Tensor::new(out_shape, data)?;
    Ok(record(name, v, xs.to_vec(), move |inp, _, g| {
        inp.iter()
            .zip(&offsets)
            .map(|(x, &(start, len))| when(x, || slice_axis(g, axis, start, len)))
            .collect()
    }))
}

fn slice_axis(a: &Var, axis: usize, start: usize, len: usize) -> Var {
    let shape = a.shape();
    assert!(start + len <= shape.0[axis], "slice {start}+{len} out of range for {shape}");
    let (outer, full, inner) = axis_split(&shape, axis);
    let mut out_shape = shape;
    out_shape.0[axis] = len;
    let src = a.value().data();
    let mut data = Vec::with_capacity(out_shape.numel());
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        data.extend_from_slice(&src[base..base + len * inner]);
    }
    let v = Tensor::new(out_shape, data).expect("slice shape");
    record("slice", v, vec![a.clone()], move |_, _, g| vec![Some(embed_axis(g, axis, start, full))])
}

/// Places `a` at `start` inside a zero tensor whose `axis` has size `full`.
fn embed_axis(a: &Var, axis: usize, start: usize, full: usize) -> Var {
    let shape = a.shape();
    let len = shape.0[axis];
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out_shape = shape;
    out_shape.0[axis] = full;
    let mut out = Tensor::zeros(out_shape);
    let src = a.value().data();
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        out.data_mut()[base..base + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
    }
    record("embed", out, vec![a.clone()], move |_, _, g| vec![Some(slice_axis(g, axis, start, len))])
}

/// Channel-wise concatenation; every input must share N, H and W.
pub fn concat_channels(xs: &[Var]) -> Result<Var> {
    concat_axis("channel_concat", xs, 1)
}

pub fn concat_batch(xs: &[Var]) -> Result<Var> {
    concat_axis("batch_concat", xs, 0)
}

pub fn slice_channels(a: &Var, start: usize, len: usize) -> Var {
    slice_axis(a, 1, start, len)
}

pub fn slice_batch(a: &Var, start: usize, len: usize) -> Var {
    slice_axis(a, 0, start, len)
}

// ---------------------------------------------------------------- gather/scatter

/// `out[k] = a[index[k]]` over flat offsets.
pub fn index_gather(a: &Var, index: Rc<Vec<usize>>, out_shape: Shape) -> Var {
    assert_eq!(index.len(), out_shape.numel());
    let src = a.value().data();
    let data = index.iter().map(|&i| src[i]).collect();
    let v = Tensor::new(out_shape, data).expect("gather shape");
    let in_shape = a.shape();
    record("index_gather", v, vec![a.clone()], move |_, _, g| {
        vec![Some(index_scatter(g, index.clone(), in_shape))]
    })
}

/// `out[index[k]] += a[k]`; the adjoint of [`index_gather`].
pub fn index_scatter(a: &Var, index: Rc<Vec<usize>>, out_shape: Shape) -> Var {
    assert_eq!(index.len(), a.shape().numel());
    let mut out = Tensor::zeros(out_shape);
    {
        let d = out.data_mut();
        for (&i, &v) in index.iter().zip(a.value().data()) {
            d[i] += v;
        }
    }
    let in_shape = a.shape();
    record("index_scatter", out, vec![a.clone()], move |_, _, g| {
        vec![Some(index_gather(g, index.clone(), in_shape))]
    })
}

/// Row groups of a batch with one weight per group.
#[derive(Clone, Debug)]
pub struct Segments {
    pub rows: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

/// `out[s] = weight[s] · Σ_{r ∈ rows[s]} a[r]`, summed exactly so the
/// value is independent of row order.
pub fn segment_sum(a: &Var, seg: Rc<Segments>) -> Var {
    let [n, c, h, w] = a.shape().0;
    let row = c * h * w;
    let src = a.value().data();
    let mut out = Tensor::zeros(Shape::new(seg.rows.len(), c, h, w));
    for (s, (rows, &wt)) in seg.rows.iter().zip(&seg.weights).enumerate() {
        let dst = &mut out.data_mut()[s * row..(s + 1) * row];
        for (e, d) in dst.iter_mut().enumerate() {
            *d = wt * exact_sum(rows.iter().map(|&r| src[r * row + e]));
        }
    }
    record("segment_sum", out, vec![a.clone()], move |_, _, g| vec![Some(segment_spread(g, seg.clone(), n))])
}

/// Adjoint of [`segment_sum`]: `out[r] = Σ_{s ∋ r} weight[s] · a[s]`.
pub fn segment_spread(a: &Var, seg: Rc<Segments>, n_rows: usize) -> Var {
    let [_, c, h, w] = a.shape().0;
    let row = c * h * w;
    let src = a.value().data();
    let mut out = Tensor::zeros(Shape::new(n_rows, c, h, w));
    for (s, (rows, &wt)) in seg.rows.iter().zip(&seg.weights).enumerate() {
        for &r in rows {
            let dst = &mut out.data_mut()[r * row..(r + 1) * row];
            for (d, v) in dst.iter_mut().zip(&src[s * row..(s + 1) * row]) {
                *d += wt * v;
            }
        }
    }
    record("segment_spread", out, vec![a.clone()], move |_, _, g| vec![Some(segment_sum(g, seg.clone()))])
}

// ---------------------------------------------------------------- linear algebra

/// Batched matrix product over the trailing (H, W) dims:
/// `(N, C, P, Q) · (N, C, Q, R) -> (N, C, P, R)`.
pub fn matmul(a: &Var, b: &Var) -> Result<Var> {
    let [n, c, p, q] = a.shape().0;
    let [bn, bc, bq, r] = b.shape().0;
    if (n, c, q) != (bn, bc, bq) {
        return Err(TensorError::shape("matmul", format!("{} x {}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.value().data(), b.value().data());
    let mut out = Tensor::zeros(Shape::new(n, c, p, r));
    {
        let od = out.data_mut();
        for m in 0..n * c {
            let (ao, bo, oo) = (m * p * q, m * q * r, m * p * r);
            for i in 0..p {
                for k in 0..q {
                    let av = ad[ao + i * q + k];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..r {
                        od[oo + i * r + j] += av * bd[bo + k * r + j];
                    }
                }
            }
        }
    }
    Ok(record("matmul", out, vec![a.clone(), b.clone()], |i, _, g| {
        vec![
            when(&i[0], || matmul(g, &transpose_hw(&i[1])).expect("matmul grad a")),
            when(&i[1], || matmul(&transpose_hw(&i[0]), g).expect("matmul grad b")),
        ]
    }))
}

// ---------------------------------------------------------------- convolution

/// Raw strided convolution of `x (N, Ci, H, W)` with `w (Co, Ci, kh, kw)`,
/// no bias.
pub fn conv2d_raw(x: &Var, w: &Var, stride: usize, pad: usize) -> Result<Var> {
    let [_, ci, h, wd] = x.shape().0;
    let [_, wci, kh, kw] = w.shape().0;
    if ci != wci {
        return Err(TensorError::shape("conv2d", format!("input has {ci} channels, kernel expects {wci}")));
    }
    if conv_out_len(h, kh, stride, pad).is_none() {
        return Err(TensorError::shape("conv2d", format!("height {h} with pad {pad} is smaller than kernel {kh}")));
    }
    if conv_out_len(wd, kw, stride, pad).is_none() {
        return Err(TensorError::shape("conv2d", format!("width {wd} with pad {pad} is smaller than kernel {kw}")));
    }
    let v = conv::conv2d_forward(x.value(), w.value(), stride, pad);
    Ok(record("conv2d", v, vec![x.clone(), w.clone()], move |i, _, g| {
        vec![
            when(&i[0], || conv_transpose2d_raw(g, &i[1], stride, pad, (h, wd)).expect("conv2d grad x")),
            when(&i[1], || conv2d_weight_grad(&i[0], g, (kh, kw), stride, pad).expect("conv2d grad w")),
        ]
    }))
}

/// Spatial size produced by a transposed convolution that inverts the sizing
/// of a `conv2d` with the same geometry (64→32 becomes 32→64 for k5/s2/p2).
pub fn conv_transpose_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    // Largest input length whose forward conv still has `len` outputs.
    (len * stride + kernel).saturating_sub(2 * pad + 1).max(1)
}

/// Raw transposed convolution (adjoint of [`conv2d_raw`]) producing spatial
/// size `out_hw`. `w` keeps the forward `(Co, Ci, kh, kw)` layout, so `x`
/// has `Co` channels and the output `Ci`.
pub fn conv_transpose2d_raw(x: &Var, w: &Var, stride: usize, pad: usize, out_hw: (usize, usize)) -> Result<Var> {
    let [_, c, ho, wo] = x.shape().0;
    let [wco, _, kh, kw] = w.shape().0;
    if c != wco {
        return Err(TensorError::shape("deconv2d", format!("input has {c} channels, kernel expects {wco}")));
    }
    let (h, wd) = out_hw;
    if conv_out_len(h, kh, stride, pad) != Some(ho) || conv_out_len(wd, kw, stride, pad) != Some(wo) {
        return Err(TensorError::shape(
            "deconv2d",
            format!("output {h}x{wd} is not consistent with input {ho}x{wo} for kernel {kh}, stride {stride}, pad {pad}"),
        ));
    }
    let v = conv::conv2d_input_grad(x.value(), w.value(), stride, pad, out_hw);
    Ok(record("deconv2d", v, vec![x.clone(), w.clone()], move |i, _, g| {
        vec![
            when(&i[0], || conv2d_raw(g, &i[1], stride, pad).expect("deconv2d grad x")),
            when(&i[1], || conv2d_weight_grad(g, &i[0], (kh, kw), stride, pad).expect("deconv2d grad w")),
        ]
    }))
}

/// Weight gradient of a convolution as a differentiable op of both the
/// input `x` and the output gradient `gy`.
pub fn conv2d_weight_grad(x: &Var, gy: &Var, k: (usize, usize), stride: usize, pad: usize) -> Result<Var> {
    let [n, _, h, wd] = x.shape().0;
    let [gn, _, ho, wo] = gy.shape().0;
    if n != gn || conv_out_len(h, k.0, stride, pad) != Some(ho) || conv_out_len(wd, k.1, stride, pad) != Some(wo) {
        return Err(TensorError::shape("conv2d_weight_grad", format!("{} vs {}", x.shape(), gy.shape())));
    }
    let v = conv::conv2d_weight_grad(x.value(), gy.value(), k.0, k.1, stride, pad);
    Ok(record("conv2d_weight_grad", v, vec![x.clone(), gy.clone()], move |i, _, g| {
        vec![
            when(&i[0], || conv_transpose2d_raw(&i[1], g, stride, pad, (h, wd)).expect("wgrad grad x")),
            when(&i[1], || conv2d_raw(&i[0], g, stride, pad).expect("wgrad grad gy")),
        ]
    }))
}

/// 2×2 max pooling with stride 2 (odd trailing rows/cols are dropped).
pub fn max_pool2(a: &Var) -> Var {
    let [n, c, h, w] = a.shape().0;
    let (ho, wo) = (h / 2, w / 2);
    let src = a.value().data();
    let mut index = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..ho {
            for x in 0..wo {
                let cands = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if src[k] > src[best] {
                        best = k;
                    }
                }
                index.push(best);
            }
        }
    }
    index_gather(a, Rc::new(index), Shape::new(n, c, ho, wo))
}

// ---------------------------------------------------------------- operators

macro_rules! bin_op {
    ($tr:ident, $m:ident, $f:ident) => {
        impl ops::$tr<&Var> for &Var {
            type Output = Var;
            fn $m(self, rhs: &Var) -> Var {
                $f(self, rhs)
            }
        }
        impl ops::$tr<Var> for Var {
            type Output = Var;
            fn $m(self, rhs: Var) -> Var {
                $f(&self, &rhs)
            }
        }
        impl ops::$tr<&Var> for Var {
            type Output = Var;
            fn $m(self, rhs: &Var) -> Var {
                $f(&self, rhs)
            }
        }
        impl ops::$tr<Var> for &Var {
            type Output = Var;
            fn $m(self, rhs: Var) -> Var {
                $f(self, &rhs)
            }
        }
    };
}

bin_op!(Add, add, add);
bin_op!(Sub, sub, sub);
bin_op!(Mul, mul, mul);
bin_op!(Div, div, div);

impl ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        neg(self)
    }
}

impl ops::Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        neg(&self)
    }
}

impl ops::Mul<f64> for &Var {
    type Output = Var;
    fn mul(self, rhs: f64) -> Var {
        scale(self, rhs)
    }
}

impl ops::Mul<f64> for Var {
    type Output = Var;
    fn mul(self, rhs: f64) -> Var {
        scale(&self, rhs)
    }
}

impl ops::Add<f64> for &Var {
    type Output = Var;
    fn add(self, rhs: f64) -> Var {
        add_scalar(self, rhs)
    }
}

impl ops::Add<f64> for Var {
    type Output = Var;
    fn add(self, rhs: f64) -> Var {
        add_scalar(&self, rhs)
    }
}

impl ops::Sub<f64> for &Var {
    type Output = Var;
    fn sub(self, rhs: f64) -> Var {
        add_scalar(self, -rhs)
    }
}

impl ops::Sub<f64> for Var {
    type Output = Var;
    fn sub(self, rhs: f64) -> Var {
        add_scalar(&self, -rhs)
    }
}
