//! Dense tensors with reverse-mode differentiation.
//!
//! Only what the dual encoder needs: matrix products, pointwise ops with
//! scalar broadcasting, time-axis max pooling, row gathers and cosine
//! matching. Everything is generic over [`Real`] so the same code runs in
//! `f32` for training and `f64` for gradient checks.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Elementwise, Gradients, Graph, Var};
pub use tensor::{cosine_similarity, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {got}", shape.iter().product::<usize>())]
    ElementCount { shape: Vec<usize>, got: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("max pooling over an empty time axis")]
    EmptyTimeAxis,
    #[error("zero-norm vector has no direction")]
    ZeroNorm,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[cfg(test)]
mod tests;
