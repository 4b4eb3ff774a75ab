//! Reverse-mode automatic differentiation over dense `N×C×H×W` tensors in
//! double precision.
//!
//! [`Var`] wraps a [`Tensor`] in a computation graph. Backward rules are
//! themselves expressed with graph ops, so gradients can be differentiated
//! again; this is what a gradient-norm penalty on a critic needs.

mod conv;
mod error;
pub mod functional;
pub mod gradcheck;
pub mod ops;
mod tensor;
mod var;

pub use conv::conv_out_len;
pub use error::{Result, TensorError};
pub use functional::{
    activation, adain, batch_norm_eval, channel_concat, conv2d, deconv2d, input_gradient, interpolate_per_sample,
    interpolate_uniform, normalize, normalize_with_stats, segment_reduce, set_reduce, Activation, ConvSpec, NormKind,
    NormStats, ReduceMode, DEFAULT_EPS,
};
pub use gradcheck::{grad_check, GradCheck};
pub use tensor::{exact_sum, Shape, Tensor};
pub use var::{backward, grad, grad_seeded, is_grad_enabled, no_grad, GradFn, Gradients, NoGradGuard, Var};
