//! Error type shared by all solver and model-building routines.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(
        "source point {index} has an all-zero lead-field column triple; \
         exclude it from the source space before computing depth weights"
    )]
    SilentSource { index: usize },

    #[error("sensor {sensor} lies within {dist_mm:.3e} mm of source point {point}")]
    SensorTooClose {
        sensor: usize,
        point: usize,
        dist_mm: f64,
    },

    #[error("{context}: SPD factorization failed (condition estimate {cond:.3e})")]
    Singular { context: String, cond: f64 },

    #[error("singular 3x3 posterior block at source point {index} (epsilon fallback also failed)")]
    SingularBlock { index: usize },

    #[error("estimate has no activity (all per-point amplitudes are zero)")]
    NoActivity,

    #[error(
        "non-finite loss at iteration {iteration}; last finite loss {last_loss:.6e} \
         at iteration {last_iteration} (retry with a smaller learning rate)"
    )]
    NonFiniteLoss {
        iteration: usize,
        last_iteration: usize,
        last_loss: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("file format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
