//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Every primitive records an adjoint rule; [`Tape::backward`] replays them
//! newest-first from a scalar root. Reductions run left to right in row-major
//! order, so identical inputs give bit-identical values and gradients.

mod tape;
mod tensor;

pub use tape::{Gradients, Segment, Tape, Var};
pub use tensor::Tensor;

/// RMS normalization epsilon used throughout the policy.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("variable does not belong to this tape")]
    DanglingVar,
    #[error("index {index} out of range for {op} (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}
