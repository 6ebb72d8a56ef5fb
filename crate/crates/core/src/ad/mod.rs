//! Reverse-mode automatic differentiation over dense rank-0..2 tensors.
//!
//! Deliberately small: the op set is the closure of what conditioner
//! networks, spline bijectors and the contrastive objectives need. No
//! broadcasting beyond rank 2, no higher-order derivatives, 64-bit floats
//! throughout.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, GradientReport};
pub use tape::{Bcast, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{logsumexp, sigmoid, softplus, std_normal_pdf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("non-finite value at tape node {node} (element {elem})")]
    NonFinite { node: usize, elem: usize },
}
