use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// No retained draw fell inside the truncation set.
    #[error(
        "no second-half draw lies in the truncation set (alpha = {alpha}, c = {c}, \
         MC points passing = {mc_passing}/{mc_total}); try a larger alpha or radius"
    )]
    EmptyTruncation {
        alpha: f64,
        c: f64,
        mc_passing: usize,
        mc_total: usize,
    },

    #[error("enumeration guard exceeded: {count} allocations (limit {limit})")]
    Guard { count: f64, limit: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
