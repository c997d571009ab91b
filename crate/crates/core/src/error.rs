use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("run lengths sum to {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("duplicate alias ({dataset}, {label})")]
    DuplicateAlias { dataset: String, label: String },

    #[error("no class is shared between visual and audio records")]
    EmptyJoin,

    #[error("waveform too short: {samples} samples, need at least {min}")]
    TooShort { samples: usize, min: usize },

    #[error("cannot aggregate an empty accumulator")]
    EmptyAccumulator,

    #[error("need more than {n_seen} classes, found {available}")]
    TooFewClasses { n_seen: usize, available: usize },

    #[error("loss became non-finite at step {step}: {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid fixture spec: {0}")]
    FixtureSpec(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("audio {path}: {msg}")]
    Audio { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
