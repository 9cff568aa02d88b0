use thiserror::Error;

/// Errors produced anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("score undefined at zero noise (level {level})")]
    ZeroNoise { level: usize },

    #[error("condition rejected: {0}")]
    Condition(String),

    #[error("no analytic posterior available for this field")]
    NoAnalyticPosterior,

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("non-finite jacobian entry at coordinate {coord}")]
    NonFiniteJacobian { coord: usize },

    #[error("power iteration did not converge at step {step}")]
    PowerIteration { step: usize },

    #[error("closed loop is not contracting: best rate {lambda} sits on the grid boundary")]
    NotContracting { lambda: f64 },

    #[error("certificate refused: nominal misses gate {gate} by {miss:.4} m (tolerance {tolerance} m)")]
    NominalMissesGate { gate: usize, miss: f64, tolerance: f64 },

    #[error("track generation failed: {0}")]
    TrackGeneration(String),

    #[error("missing component: {0}")]
    Missing(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
