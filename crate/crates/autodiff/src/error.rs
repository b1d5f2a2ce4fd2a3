use thiserror::Error;

/// Errors raised while building or differentiating a tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({lhs:?} vs {rhs:?})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("loss must be a scalar node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {id} does not exist on this tape ({len} nodes)")]
    DanglingNode { id: usize, len: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
