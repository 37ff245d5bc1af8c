use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("clip directory {path}: {reason}")]
    Clip { path: PathBuf, reason: String },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("external encoder `{binary}` not found ({reason}); install ffmpeg or set VSR_FFMPEG")]
    EncoderMissing { binary: String, reason: String },

    #[error("external encoder `{binary}` failed with status {status}: {stderr}")]
    EncoderFailed {
        binary: String,
        status: String,
        stderr: String,
    },

    #[error("codec round-trip returned {got} frames, expected {expected}")]
    FrameCount { expected: usize, got: usize },

    #[error("non-finite loss at step {step} (sample `{sample}`)")]
    NonFinite { step: u64, sample: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint format version {found} is not supported (this build reads <= {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) | Error::Json(_) => 2,
            Error::EncoderMissing { .. } | Error::EncoderFailed { .. } | Error::FrameCount { .. } => 3,
            Error::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
