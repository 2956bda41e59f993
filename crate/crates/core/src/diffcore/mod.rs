//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! The op set is exactly what the graph transformer needs: linear maps,
//! elementwise arithmetic, concatenation, row gathers and segment sums for
//! message passing, per-segment softmax, layer norm and cross-entropy. Every
//! op has a backward rule; [`grad_check`] compares those rules with central
//! differences.

mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("cross-entropy over an empty or zero-weight target set")]
    EmptyTargets,
    #[error("backward must start from a 1x1 output, got {0:?}")]
    NonScalarOutput((usize, usize)),
}

pub type Result<T> = std::result::Result<T, DiffError>;

#[cfg(test)]
mod tests;
