use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum GcrError {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: row {row} has zero norm")]
    ZeroNormRow { row: usize },

    #[error("degenerate batch: need at least 2 samples, got {0}")]
    DegenerateBatch(usize),

    #[error("degenerate graph: node {node} has zero degree")]
    DegenerateGraph { node: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("specification error at layer boundary {boundary}: {reason}")]
    Specification { boundary: usize, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GcrError>;

pub(crate) fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> GcrError {
    GcrError::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
