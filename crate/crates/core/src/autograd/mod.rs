//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Ops are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! replays their adjoints in reverse. The op set is the one the forecasting
//! stack needs: matmul, elementwise arithmetic, channels-last 1-D
//! convolution with stride and dilation, ReLU/sigmoid/tanh, softmax over an
//! axis, batch-norm, concat, mean/std/max pooling, graph propagation and a
//! few fused losses.
//!
//! [`finite_diff_check`] is the verification oracle: it compares the tape's
//! gradient with central differences.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_five_point};
pub use tape::{conv_output_len, sigmoid, Gradients, NormMode, PoolKind, Tape, Var, BN_EPS, STD_EPS};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} elements")]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for {shape:?}")]
    InvalidAxis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("computation record already consumed by a backward pass")]
    Consumed,
}

#[cfg(test)]
mod tests;
