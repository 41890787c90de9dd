//! Error type shared across the toolbox.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Model configuration and shape mismatches.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid caller-supplied data (empty graphs, bad ranges, missing sources).
    #[error("input error: {0}")]
    Input(String),

    /// A trace, checkpoint, or circuit does not match the parameters it is applied to.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Structural problems in a computation graph (cycles, dangling vertices).
    #[error("structural error: {0}")]
    Structure(String),

    /// The requested edge lies on no input-to-output path.
    #[error("path infeasible: {0}")]
    PathInfeasible(String),

    /// Non-finite loss or gradient during optimization.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed artifact files (CSV, DOT, JSONL records).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
