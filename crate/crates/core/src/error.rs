use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error in F{function_id}: {what}")]
    Domain { function_id: u8, what: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("singular covariance ({0}); increase the shrinkage")]
    SingularCovariance(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("single-class input: {0}")]
    SingleClass(String),

    #[error("missing values in rows {rows:?}")]
    MissingValues { rows: Vec<usize> },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("replicate with seed {seed} failed: {source}")]
    Replicate {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("incomplete run directory: {0}")]
    IncompleteRun(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
