//! Deterministic dense f64 primitives with reverse-mode gradients.
//!
//! Every operation here is a pure function: same inputs, bit-identical
//! outputs. Matmul accumulates over the inner index in increasing order
//! (row-major accumulation), so equality-based tests can rely on exact
//! reproducibility. The [`tape`] submodule wraps the same forward kernels
//! in a gradient tape for training.

mod matrix;
mod ops;
pub mod tape;

pub use matrix::{AttentionMask, Matrix};
pub use ops::{
    depthwise_conv1d, masked_softmax_rows, matmul, rmsnorm, scaled_dot_attention, softmax_rows,
    RMSNORM_EPS,
};
pub use tape::{gradient_check, Gradients, Tape, Var};
