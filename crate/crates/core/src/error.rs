use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the separation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid frame parameters: {0}")]
    FrameParams(String),

    #[error("overlap-add condition violated: {0}")]
    Cola(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid band scheme: {0}")]
    Scheme(String),

    #[error("unknown source {0:?} (expected vocals, bass, drums or other)")]
    UnknownSource(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data generation failed: {0}")]
    Data(String),

    #[error("training fault: {0}")]
    Training(String),

    #[error("undefined metric: {0}")]
    Metric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("audio file {path}: {source}")]
    Audio {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
