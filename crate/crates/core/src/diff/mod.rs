//! Dense arrays with a reverse-mode differentiation tape.
//!
//! Every primitive the attack pipeline needs (elementwise arithmetic, clamp,
//! power, log/exp/logistic, reductions, matrix multiply, 2-D convolution,
//! bilinear resampling and crop-resize) records a node on a [`Tape`];
//! [`Tape::backward`] walks the nodes once in reverse.

mod check;
pub mod kernels;
mod sample;
mod tape;
mod tensor;

pub use check::{evaluate, finite_diff_check, gradient, value_and_gradient};
pub use sample::SampleMap;
pub use tape::{concat, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

pub(crate) use tape::sigmoid;
