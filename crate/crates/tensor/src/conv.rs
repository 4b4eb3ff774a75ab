//! im2col convolution kernels on raw tensors.
//!
//! Weights use the `(out_ch, in_ch, kh, kw)` layout of the forward
//! convolution. A transposed convolution reuses the same buffer: it is the
//! input-gradient pass of the forward convolution, so its input has
//! `out_ch` channels and its output `in_ch`.

use rayon::prelude::*;

use crate::tensor::{Shape, Tensor};

/// Output extent of a strided convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one sample into `col`, row `r` starting at `r * ld`.
fn im2col(x: &[f64], g: &Geom, col: &mut [f64], ld: usize) {
    let p = g.p();
    let mut row = 0;
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                let dst = &mut col[row * ld..row * ld + p];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = (oy * g.stride + ky).checked_sub(g.pad).filter(|&iy| iy < g.h) else {
                        line.fill(0.0);
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, &s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + k − pad` lies in `0..w`.
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(wo);
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Folds `col` (row stride `ld`) back onto one sample, accumulating.
fn col2im(col: &[f64], g: &Geom, x: &mut [f64], ld: usize) {
    let p = g.p();
    let mut row = 0;
    for c in 0..g.ci {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                let src = &col[row * ld..row * ld + p];
                for oy in 0..g.ho {
                    let Some(iy) = (oy * g.stride + ky).checked_sub(g.pad).filter(|&iy| iy < g.h) else {
                        continue;
                    };
                    if lo == hi {
                        continue;
                    }
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let first = lo * g.stride + kx - g.pad;
                    for (d, &s) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c (m×n) = a (m×k) · b (k×n)` with explicit row/column strides for a and b.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    // SAFETY: slice lengths cover the strided extents for the given dims.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Upper bound on unfolded-buffer elements per chunk of samples.
const COL_BUDGET: usize = 1 << 22;

/// Sample ranges processed together by one GEMM. Depends only on shapes,
/// so results do not vary with the thread count.
fn chunks(n: usize, per_sample: usize) -> Vec<(usize, usize)> {
    let size = (COL_BUDGET / per_sample.max(1)).clamp(1, n.max(1));
    (0..n).step_by(size).map(|s| (s, size.min(n - s))).collect()
}

/// Forward convolution without bias. Panics on inconsistent shapes; the
/// checked entry point is [`crate::ops::conv2d`].
pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, ci, h, wd] = x.shape().0;
    let [co, wci, kh, kw] = w.shape().0;
    assert_eq!(ci, wci);
    let ho = conv_out_len(h, kh, stride, pad).expect("conv2d height");
    let wo = conv_out_len(wd, kw, stride, pad).expect("conv2d width");
    let g = Geom { ci, h, w: wd, kh, kw, stride, pad, ho, wo };
    let (k, p) = (g.k(), g.p());
    let xd = x.data();
    let wdat = w.data();
    let sx = ci * h * wd;
    let parts: Vec<Vec<f64>> = chunks(n, k * p)
        .into_par_iter()
        .map(|(s, len)| {
            let ld = len * p;
            let mut col = vec![0.0; k * ld];
            for i in 0..len {
                im2col(&xd[(s + i) * sx..(s + i + 1) * sx], &g, &mut col[i * p..], ld);
            }
            let mut y = vec![0.0; co * ld];
            gemm(co, k, ld, wdat, k, 1, &col, ld, 1, &mut y);
            // (co, len·p) → (len, co, p)
            let mut out = vec![0.0; len * co * p];
            for i in 0..len {
                for o in 0..co {
                    out[(i * co + o) * p..(i * co + o + 1) * p].copy_from_slice(&y[o * ld + i * p..o * ld + (i + 1) * p]);
                }
            }
            out
        })
        .collect();
    Tensor::new(Shape::new(n, co, ho, wo), parts.concat()).expect("conv2d output size")
}

/// Gathers `(len, co, p)` rows of `src` into a `(co, len·p)` matrix.
fn channels_major(src: &[f64], len: usize, co: usize, p: usize) -> Vec<f64> {
    let ld = len * p;
    let mut m = vec![0.0; co * ld];
    for i in 0..len {
        for o in 0..co {
            m[o * ld + i * p..o * ld + (i + 1) * p].copy_from_slice(&src[(i * co + o) * p..(i * co + o + 1) * p]);
        }
    }
    m
}

/// Gradient of [`conv2d_forward`] with respect to its input; equivalently the
/// transposed convolution of `gy` with `w`, producing `in_hw` spatial size.
pub fn conv2d_input_grad(gy: &Tensor, w: &Tensor, stride: usize, pad: usize, in_hw: (usize, usize)) -> Tensor {
    let [n, co, ho, wo] = gy.shape().0;
    let [wco, ci, kh, kw] = w.shape().0;
    assert_eq!(co, wco);
    let (h, wd) = in_hw;
    let g = Geom { ci, h, w: wd, kh, kw, stride, pad, ho, wo };
    debug_assert_eq!(conv_out_len(h, kh, stride, pad), Some(ho));
    let (k, p) = (g.k(), g.p());
    let gd = gy.data();
    let wdat = w.data();
    let sx = ci * h * wd;
    let parts: Vec<Vec<f64>> = chunks(n, k * p)
        .into_par_iter()
        .map(|(s, len)| {
            let ld = len * p;
            let gm = channels_major(&gd[s * co * p..(s + len) * co * p], len, co, p);
            let mut col = vec![0.0; k * ld];
            gemm(k, co, ld, wdat, 1, k, &gm, ld, 1, &mut col);
            let mut x = vec![0.0; len * sx];
            for i in 0..len {
                col2im(&col[i * p..], &g, &mut x[i * sx..(i + 1) * sx], ld);
            }
            x
        })
        .collect();
    Tensor::new(Shape::new(n, ci, h, wd), parts.concat()).expect("conv2d input-grad size")
}

/// Gradient of [`conv2d_forward`] with respect to its weight.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Tensor {
    let [n, ci, h, wd] = x.shape().0;
    let [gn, co, ho, wo] = gy.shape().0;
    assert_eq!(n, gn);
    let g = Geom { ci, h, w: wd, kh, kw, stride, pad, ho, wo };
    debug_assert_eq!(conv_out_len(h, kh, stride, pad), Some(ho));
    let (k, p) = (g.k(), g.p());
    let xd = x.data();
    let gd = gy.data();
    let sx = ci * h * wd;
    // Per-chunk partials summed in chunk order keep the result independent
    // of the thread count.
    let partials: Vec<Vec<f64>> = chunks(n, k * p)
        .into_par_iter()
        .map(|(s, len)| {
            let ld = len * p;
            let mut col = vec![0.0; k * ld];
            for i in 0..len {
                im2col(&xd[(s + i) * sx..(s + i + 1) * sx], &g, &mut col[i * p..], ld);
            }
            let gm = channels_major(&gd[s * co * p..(s + len) * co * p], len, co, p);
            let mut gw = vec![0.0; co * k];
            gemm(co, ld, k, &gm, ld, 1, &col, 1, ld, &mut gw);
            gw
        })
        .collect();
    let mut out = Tensor::zeros(Shape::new(co, ci, kh, kw));
    for part in partials {
        for (o, v) in out.data_mut().iter_mut().zip(part) {
            *o += v;
        }
    }
    out
}
