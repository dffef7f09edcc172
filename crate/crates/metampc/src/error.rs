use thiserror::Error;

/// Errors shared across the numerical modules.
#[derive(Error, Debug)]
pub enum Error {
    #[error("matrix is not positive semi-definite (failed at jitter {max_jitter:.3e})")]
    NotPsd { max_jitter: f64 },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("track projection did not converge after {iters} iterations")]
    ProjectionDiverged { iters: usize },

    #[error("optimizer found no descent direction at the initial point")]
    OptimFailed,

    #[error("solver cost is non-finite at the initial point")]
    SolveFailed,

    #[error("trajectory log is empty")]
    EmptyLog,

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(expected: usize, got: usize, context: &'static str) -> Self {
        Error::DimensionMismatch {
            expected,
            got,
            context,
        }
    }
}
