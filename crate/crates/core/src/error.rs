use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    /// A vector that must be normalized had (near-)zero norm.
    #[error("degenerate embedding: row {row} of {context} has norm {norm:e}")]
    DegenerateEmbedding {
        context: &'static str,
        row: usize,
        norm: f64,
    },

    #[error("degenerate transform {index}: {detail}")]
    DegenerateTransform { index: usize, detail: String },

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("infeasible cluster layout: {0}")]
    Infeasible(String),

    #[error("row {row}: {detail}")]
    Parse { row: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
