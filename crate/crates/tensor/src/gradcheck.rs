//! Central finite-difference checks of analytic gradients.

use crate::error::Result;
use crate::ops;
use crate::tensor::Tensor;
use crate::var::{grad, Var};

/// Denominator floor of the relative error, so gradients that are exactly
/// or nearly zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative discrepancy `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Fixed pseudo-random projection weights in [−1, 1], used to reduce a
/// tensor-valued op to a scalar.
pub fn projection(shape: crate::Shape, seed: u64) -> Tensor {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

/// Compares the analytic gradient of `f` against central differences with
/// step `step` on every element of every input.
///
/// A tensor-valued `f` is reduced with a fixed random projection first.
pub fn grad_check(f: impl Fn(&[Var]) -> Var, inputs: &[Tensor], step: f64) -> Result<GradCheck> {
    let scalarize = |out: Var| -> Var {
        if out.shape().numel() == 1 {
            out
        } else {
            let r = projection(out.shape(), 17);
            ops::sum_all(&ops::mul_const(&out, &r))
        }
    };
    let leaves: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone())).collect();
    let y = scalarize(f(&leaves));
    let refs: Vec<&Var> = leaves.iter().collect();
    let grads = grad(&y, &refs, false)?;

    let eval = |k: usize, idx: usize, delta: f64| -> f64 {
        // Constants rather than a no-grad guard, so `f` may take gradients
        // internally (penalty terms).
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| {
                if j == k {
                    let mut t = t.clone();
                    t.data_mut()[idx] += delta;
                    Var::constant(t)
                } else {
                    Var::constant(t.clone())
                }
            })
            .collect();
        scalarize(f(&vars)).item()
    };

    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, elements: 0 };
    for (k, t) in inputs.iter().enumerate() {
        let g = grads[k].as_ref().map(|g| g.value().clone()).unwrap_or_else(|| Tensor::zeros(t.shape()));
        for idx in 0..t.numel() {
            let numeric = (eval(k, idx, step) - eval(k, idx, -step)) / (2.0 * step);
            let analytic = g.data()[idx];
            let e = rel_error(analytic, numeric);
            report.elements += 1;
            if e > report.max_rel_error || !e.is_finite() {
                report = GradCheck { max_rel_error: e, worst: (k, idx), analytic, numeric, ..report };
            }
        }
    }
    Ok(report)
}
