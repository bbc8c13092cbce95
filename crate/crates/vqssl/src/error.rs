//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parameter stores are not congruent: {0}")]
    Congruence(String),

    #[error("zero-norm vector in cosine regression (norm {norm:.3e} < 1e-12)")]
    ZeroNorm { norm: f64 },

    #[error("degenerate supervision target (|q_t| {norm:.3e} < 1e-12)")]
    DegenerateTarget { norm: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: String, expected: String },

    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("grid sizes incompatible: {0}")]
    GridIncompatible(String),

    #[error("only one class present in {context}")]
    SingleClass { context: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
