use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("circulant embedding has a negative eigenvalue ({min_eigenvalue:e}); use the Cholesky sampler instead")]
    CirculantEmbedding { min_eigenvalue: f64 },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("replicate {index}: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by bad input rather than numerical breakdown.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidArgument(_)
            | Error::GridMismatch(_)
            | Error::Config(_)
            | Error::Parse { .. } => true,
            Error::Replicate { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
