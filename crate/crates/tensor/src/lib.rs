//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Activations are NHWC, convolution kernels are `kh x kw x c_in x c_out`
//! and dense weights are `features x classes`, all row-major. Every
//! operation recorded on a [`Tape`] is evaluated eagerly; [`Tape::backward`]
//! replays the records in reverse.

pub mod checkpoint;
mod error;
mod linalg;
mod scalar;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use linalg::matmul;
pub use scalar::{DType, Scalar};
pub use tape::{ConvGeometry, Grads, Tape, Var};
pub use tensor::Tensor;
