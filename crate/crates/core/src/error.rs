use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid command: {0}")]
    InvalidCommand(String),
    #[error("sensor pose is in collision at ({0:.3}, {1:.3}, {2:.3})")]
    SensorInCollision(f64, f64, f64),
    #[error("map geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("no collision-free path between the requested poses")]
    NoPath,
    #[error("trajectory optimization produced a non-finite cost")]
    OptimizationFailed,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
