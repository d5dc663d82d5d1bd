//! Small dense-tensor kernel with reverse-mode automatic differentiation.
//!
//! Values are `f64`, row-major. A [`Tape`] records ops as they execute; a
//! single [`Tape::backward`] sweep produces gradients for every leaf that was
//! registered with [`Tape::watch`] or [`Tape::param`].

mod error;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
