use thiserror::Error;

use super::tensor::Shape;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("backward root must be a scalar, got shape {0}")]
    NonScalarRoot(Shape),
    #[error("non-finite gradient for parameter `{0}`; optimizer step aborted")]
    NonFiniteGradient(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
