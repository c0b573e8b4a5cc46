use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model:\n{0}")]
    InvalidModel(String),
    #[error("environment value {env} out of range (environment arity {arity})")]
    EnvironmentOutOfRange { env: usize, arity: usize },
    #[error("selection weights are all zero for environment {0}")]
    DegenerateSelection(usize),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("conditioning event has zero probability")]
    ZeroProbability,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no construction possible: {0}")]
    NoConstruction(String),
    #[error(
        "objective is not finite at epoch {epoch}, step {step} (loss {loss}, penalty {penalty})"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        loss: f64,
        penalty: f64,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
