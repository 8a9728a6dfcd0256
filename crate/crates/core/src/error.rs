use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid mismatch: operands live on different frequency grids")]
    GridMismatch,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("spectral amplitude is not symmetric under Ω → −Ω (max deviation {deviation:e})")]
    NotSymmetric { deviation: f64 },

    #[error("spectral amplitude is identically zero")]
    ZeroAmplitude,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("background window [{lo}, {hi}] fs not covered by the trace")]
    WindowNotCovered { lo: f64, hi: f64 },

    #[error("fit did not converge after {iterations} iterations: {reason} (residual rms {residual_rms:.4} Hz)")]
    FitFailed {
        iterations: usize,
        residual_rms: f64,
        reason: String,
    },

    #[error("worker failure: {0}")]
    Worker(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
