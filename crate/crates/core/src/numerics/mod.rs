//! Dense `f64` tensors with a reverse-mode differentiation graph.
//!
//! Every op in [`Graph`] records what its backward pass needs and checks its
//! operand shapes eagerly. Broadcasting is limited to the trailing-dimension
//! cases the model uses: a bias vector added over rows, a `[k×n]` weight
//! shared across a batch of matrices, and a suffix-shaped addend.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Rows whose Euclidean norm falls below this cannot be L2-normalized.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: row {row} has every entry masked")]
    DegenerateRow { op: &'static str, row: usize },
    #[error("l2_normalize: row {row} has norm {norm:e}, below the floor")]
    ZeroNorm { row: usize, norm: f64 },
    #[error("{op}: non-finite value {value} at flat index {index}")]
    NonFinite { op: &'static str, index: usize, value: f64 },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidDropoutRate(f64),
    #[error("{op}: index {index} out of range for size {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}
