//! Dense tensors with reverse-mode differentiation.
//!
//! Every model computation is recorded on a [`Tape`] as it runs; a single
//! call to [`Tape::backward`] then yields gradients for all leaves created
//! with `requires_grad`. Broadcasting is limited to scalar-over-tensor and
//! `[1, C]` row-over-matrix so shape bugs surface as errors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_report, FdReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;


use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis}")]
    Axis { op: &'static str, axis: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: value {value} at element {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this tape")]
    DetachedTape,
    #[error("non-finite function value {value} at probe (input {input}, element {index})")]
    NonFinite {
        input: usize,
        index: usize,
        value: f64,
    },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

#[cfg(test)]
mod tests;
