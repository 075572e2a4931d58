use thiserror::Error;

pub type Result<T> = std::result::Result<T, KdmError>;

#[derive(Debug, Error)]
pub enum KdmError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel matrix is not positive semi-definite: diagonal entry {index} = {value:e}")]
    NotPsd { index: usize, value: f64 },

    #[error("pivot {index} has nonpositive residual diagonal {value:e}")]
    NonPositivePivot { index: usize, value: f64 },

    #[error("no admissible pivot: all residual diagonals are zero")]
    NoPivot,

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("matrix of order {requested} exceeds the materialization cap {cap}")]
    MemoryCap { requested: usize, cap: usize },

    #[error("parse error at row {row}, column \"{column}\": {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("custom prior has no evaluator attached")]
    DetachedPrior,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl KdmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        KdmError::InvalidArgument(msg.into())
    }

    /// True for failures caused by the numbers rather than by how the
    /// library was called.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            KdmError::NotPsd { .. }
                | KdmError::NonPositivePivot { .. }
                | KdmError::NoPivot
                | KdmError::Solve(_)
                | KdmError::MemoryCap { .. }
        )
    }
}
