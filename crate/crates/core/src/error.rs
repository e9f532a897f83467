use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid genome: {0}")]
    InvalidGenome(String),

    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("population error: {0}")]
    Population(String),

    #[error("fitness not set for member {0}")]
    FitnessUnset(usize),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
