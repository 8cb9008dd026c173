use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("song {song}: missing file {path}")]
    MissingFile { song: String, path: PathBuf },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{layer}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        layer: &'static str,
        expected: String,
        got: String,
    },

    #[error("{0}: backward called before forward")]
    BackwardBeforeForward(&'static str),

    #[error("label sequence of length {label_len} needs {required} frames, got {frames}")]
    Unalignable {
        frames: usize,
        label_len: usize,
        required: usize,
    },

    #[error("enumeration guard exceeded: {0} paths")]
    OracleTooLarge(f64),

    #[error("no voiced frames")]
    NoVoicedFrames,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
