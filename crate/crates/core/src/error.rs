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

    #[error("malformed wav header: {0}")]
    WavHeader(String),

    #[error("unsupported wav: {field}={found}, expected {expected}")]
    WavFormat {
        field: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("audio has {samples} samples, shorter than one {window}-sample window")]
    AudioTooShort { samples: usize, window: usize },

    #[error("bad magic")]
    BadMagic,

    #[error("version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload")]
    Truncated,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("fewer distinct points than k ({distinct} < {k})")]
    TooFewDistinct { distinct: usize, k: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("total length {len} exceeds max_positions {max}")]
    PositionOverflow { len: usize, max: usize },

    #[error("token {token} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { token: usize, vocab: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
