//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by data handling, model execution, and analysis.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration values (dimensions, fractions, hyperparameters).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data, reported with its location
    /// where one is known.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint file violates the binary format.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A computation produced a non-finite value or is mathematically
    /// undefined for the given input.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
