use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("softmax over zero keys is undefined")]
    UndefinedSoftmax,

    #[error("degenerate statistics: channel {channel} has std {std:e} <= {eps:e}")]
    DegenerateStatistics { channel: usize, std: f64, eps: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("state error: {0}")]
    State(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("non-finite loss at step {step} (parameter group `{group}`)")]
    NonFinite { step: usize, group: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from invalid user input or configuration
    /// rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Input(_) | Error::Config(_) | Error::Shape(_) | Error::DegenerateInput(_)
        )
    }
}
