//! Minimal reverse-mode automatic differentiation over `(N, C, H, W)` tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the record in reverse, visiting each node once. Convolutions follow
//! the cross-correlation convention (no kernel flip).

mod conv;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: alloc::string::String },
    #[error("maxpool2 needs even spatial dims, got {h}x{w}")]
    OddDims { h: usize, w: usize },
    #[error("backward needs a one-element loss, got shape {0}")]
    NotScalar(Shape),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
}
