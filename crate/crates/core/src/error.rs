use std::io;

use thiserror::Error;

/// Errors produced anywhere in the completion and labeling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {index} at ({x}, {y}, {z}) quantizes outside the 21-bit voxel coordinate range")]
    CoordinateOutOfRange { index: usize, x: f64, y: f64, z: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("level mismatch: {0}")]
    LevelMismatch(String),

    #[error("point {index} coincides with the sensor origin")]
    ZeroRadius { index: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss at step {step} (batch {batch:?})")]
    NonFinite { step: u64, batch: Vec<usize> },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
