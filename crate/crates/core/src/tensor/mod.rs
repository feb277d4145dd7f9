//! Minimal dense-tensor library with reverse-mode automatic differentiation.
//!
//! 64-bit floats throughout. A [`Tape`] records one forward pass
//! (define-by-run); [`Tensor::backward`] walks the records in reverse and
//! returns a gradient per leaf. Shapes broadcast under the trailing rule:
//! align right, size-1 dimensions stretch, gradients sum over stretched axes.

mod ops;
mod storage;
mod tape;

pub use ops::LAYER_NORM_EPS;
pub use storage::{broadcast_shapes, Storage};
pub use tape::{Gradients, Tape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },
    #[error("cannot l2-normalize a zero vector")]
    ZeroNorm,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("operands belong to different tapes")]
    TapeMismatch,
    #[error("reshape from {from:?} to {to:?} changes the element count")]
    BadReshape { from: Vec<usize>, to: Vec<usize> },
    #[error("{perm:?} is not a permutation of 0..{rank}")]
    BadPermutation { perm: Vec<usize>, rank: usize },
    #[error("slice [{start}, {start}+{len}) out of bounds on axis {axis} of size {dim}")]
    BadSlice {
        axis: usize,
        start: usize,
        len: usize,
        dim: usize,
    },
    #[error("index {index} out of bounds for axis of size {dim}")]
    BadIndex { index: usize, dim: usize },
    #[error("concat needs at least one operand")]
    EmptyConcat,
}
