use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("missing artifact: {}", path.display())]
    MissingArtifact { path: PathBuf },

    #[error("dataset at {} lists sample `{id}` but its file is missing", root.display())]
    MissingSample { root: PathBuf, id: String },

    #[error("checksum mismatch for sample `{id}`: manifest {expected}, file {actual}")]
    ChecksumMismatch {
        id: String,
        expected: String,
        actual: String,
    },

    #[error("geometry mismatch for `{id}`: expected {expected:?}, found {found:?}")]
    GeometryMismatch {
        id: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error(
        "model fingerprint mismatch: energy model is bound to {expected} but depth model is {found} \
         (an energy model is only valid for the depth model it was trained against)"
    )]
    FingerprintMismatch { expected: String, found: String },

    #[error("frame `{0}` has no valid sparse depth anchors")]
    NoAnchors(String),

    #[error("stream order violated: {0}")]
    StreamOrder(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
