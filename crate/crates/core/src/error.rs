use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("prompt must contain at least one token")]
    EmptyPrompt,

    #[error("symbol '{symbol}' renders at {freq_hz} Hz, not below the Nyquist frequency {nyquist_hz} Hz")]
    AboveNyquist { symbol: char, freq_hz: f64, nyquist_hz: f64 },

    #[error("output directory {0} exists and is not empty (pass force to overwrite)")]
    OutputExists(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line} (record '{record}'): {reason}")]
    Manifest { path: PathBuf, line: usize, record: String, reason: String },

    #[error("input too short: need at least {needed} samples/frames, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("prompt bundle: {0}")]
    Prompt(String),

    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),

    #[error(transparent)]
    Score(#[from] ScoreParseError),

    #[error(transparent)]
    Metric(#[from] MetricError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training stage must be 1 or 2, got {0}")]
    InvalidStage(u8),

    #[error("empty dataset")]
    EmptyData,

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Failure modes of the `accuracy:A fluency:F` codec.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreParseError {
    #[error("missing field '{0}'")]
    MissingField(&'static str),
    #[error("fields out of order: expected accuracy before fluency")]
    WrongOrder,
    #[error("'{0}' is not a decimal integer")]
    NotInteger(String),
    #[error("{field} score {value} outside 0..=10")]
    OutOfRange { field: &'static str, value: i64 },
    #[error("malformed score string: {0:?}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("reference is empty after normalization")]
    EmptyReference,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
}
