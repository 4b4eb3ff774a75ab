//! Dense N×C×H×W storage and the raw (non-differentiable) kernels used by the
//! graph ops.

use std::fmt;

use crate::error::{Result, TensorError};

/// Four-dimensional shape `(batch, channels, height, width)`.
///
/// Lower-rank values use size-1 trailing dims: a scalar is `(1, 1, 1, 1)`,
/// a batch of logits is `(N, K, 1, 1)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    /// Broadcast result of two shapes, where every dim must match or be 1.
    pub fn broadcast(&self, other: &Shape) -> Option<Shape> {
        let mut out = [0; 4];
        for d in 0..4 {
            let (a, b) = (self.0[d], other.0[d]);
            out[d] = if a == b {
                a
            } else if a == 1 {
                b
            } else if b == 1 {
                a
            } else {
                return None;
            };
        }
        Some(Shape(out))
    }

    /// True when `self` can be broadcast up to `target`.
    pub fn broadcasts_to(&self, target: &Shape) -> bool {
        (0..4).all(|d| self.0[d] == target.0[d] || self.0[d] == 1)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Plain dense array. The differentiable wrapper is [`crate::Var`].
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} values]", self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([a, b, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, idx: [usize; 4]) -> f64 {
        let s = self.shape.strides();
        self.data[idx[0] * s[0] + idx[1] * s[1] + idx[2] * s[2] + idx[3]]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Elementwise binary op with broadcasting.
    pub fn zip_broadcast(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Option<Tensor> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Some(Tensor { shape: self.shape, data });
        }
        let out = self.shape.broadcast(&other.shape)?;
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let [n, c, h, w] = out.0;
        let mut data = Vec::with_capacity(out.numel());
        for i0 in 0..n {
            for i1 in 0..c {
                for i2 in 0..h {
                    let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                    let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                    for i3 in 0..w {
                        data.push(f(self.data[ba + i3 * sa[3]], other.data[bb + i3 * sb[3]]));
                    }
                }
            }
        }
        Some(Tensor { shape: out, data })
    }

    /// Sums over every dim where `target` is 1 and `self` is not.
    pub fn sum_to(&self, target: Shape) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        assert!(
            target.broadcasts_to(&self.shape),
            "sum_to: {} cannot reduce to {}",
            self.shape,
            target
        );
        let st = broadcast_strides(&target, &self.shape);
        let [n, c, h, w] = self.shape.0;
        let mut out = vec![0.0; target.numel()];
        let mut k = 0;
        for i0 in 0..n {
            for i1 in 0..c {
                for i2 in 0..h {
                    let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                    for i3 in 0..w {
                        out[base + i3 * st[3]] += self.data[k];
                        k += 1;
                    }
                }
            }
        }
        Tensor { shape: target, data: out }
    }

    /// Repeats size-1 dims up to `target`.
    pub fn broadcast_to(&self, target: Shape) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        assert!(
            self.shape.broadcasts_to(&target),
            "broadcast_to: {} cannot expand to {}",
            self.shape,
            target
        );
        let ss = broadcast_strides(&self.shape, &target);
        Tensor::from_fn(target, |[a, b, y, x]| {
            self.data[a * ss[0] + b * ss[1] + y * ss[2] + x * ss[3]]
        })
    }
}

/// Strides of `src` viewed inside `out`, with 0 on broadcast dims.
pub(crate) fn broadcast_strides(src: &Shape, out: &Shape) -> [usize; 4] {
    let s = src.strides();
    let mut r = [0; 4];
    for d in 0..4 {
        r[d] = if src.0[d] == out.0[d] { s[d] } else { 0 };
    }
    r
}

/// Exactly rounded sum of `values` (Shewchuk partials). The result does not
/// depend on the order of the inputs.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the partials to a single double, handling the half-way case.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}
