//! Minimal reverse-mode differentiation over a static tape.
//!
//! Only the operations the three architectures need are provided. Values are
//! stored and accumulated in f64; training code rounds parameters to f32
//! storage precision after each update.

pub mod check;
mod conv;
mod tape;
mod tensor;

use thiserror::Error;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any parameter")]
    Detached,
    #[error("backward already ran on this tape")]
    AlreadyBackpropagated,
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("{0}")]
    InvalidArgument(String),
}
