use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the super-resolution pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scale {scale}: output dimension would be {width}x{height}")]
    InvalidScale { scale: f64, width: usize, height: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("expected {expected} channel(s), got {actual}")]
    Channels { expected: usize, actual: usize },

    #[error("window centered at ({x}, {y}) with side {side} exceeds {width}x{height} bounds")]
    OutOfBounds {
        x: i64,
        y: i64,
        side: usize,
        width: usize,
        height: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("feature map {path}: {reason}")]
    FeatureLoad { path: PathBuf, reason: String },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("training diverged at iteration {iteration} (lr {lr:e}, triplet {triplet}): loss {loss}")]
    Diverged {
        iteration: usize,
        lr: f64,
        triplet: usize,
        loss: f64,
    },

    #[error("tile at ({x}, {y}): {source}")]
    Tile {
        x: usize,
        y: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}
