use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row} (id {id}): {message}")]
    InvalidRow { row: usize, id: String, message: String },

    #[error("row {row} (id {id}): inconsistent score: log score exceeds the expert's density peak (l' = {lprime:e})")]
    InconsistentScore { row: usize, id: String, lprime: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix not positive definite after jitter escalation to {jitter:e} (max diagonal {max_diag:e})")]
    NotPositiveDefinite { jitter: f64, max_diag: f64 },

    #[error("quadrature did not converge: estimate {estimate}, error bound {error:e}")]
    Quadrature { estimate: f64, error: f64 },

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("draws: {0}")]
    Draws(String),

    #[error("gradient check failed for `{parameter}`: analytic {analytic}, finite difference {numeric}")]
    GradientMismatch { parameter: String, analytic: f64, numeric: f64 },

    #[error("sampler: {0}")]
    Sampler(String),

    #[error("optimizer did not converge after {iterations} iterations (stationarity {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
