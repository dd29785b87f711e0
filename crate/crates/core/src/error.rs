use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: {len} samples, need at least {needed}")]
    SignalTooShort { len: usize, needed: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("token {token} out of range at frame {frame}, level {level}")]
    TokenOutOfRange { frame: usize, level: usize, token: u16 },

    #[error("words overlap at word {index}")]
    WordsOverlap { index: usize },

    #[error("frame {frame} out of range for {frames} frames")]
    FrameOutOfRange { frame: usize, frames: usize },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch { what: &'static str, left: usize, right: usize },

    #[error("prefix of {len} frames exceeds context of {context}")]
    PrefixTooLong { len: usize, context: usize },

    #[error("depth position {position} out of range (max {max})")]
    PositionOutOfRange { position: usize, max: usize },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("scorer failed at target word {j}, source prefix {i}: {message}")]
    Scorer { j: usize, i: usize, message: String },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("need at least 5 scores per dataset, got {0}")]
    TooFewScores(usize),

    #[error("session already finished")]
    SessionFinished,

    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}
