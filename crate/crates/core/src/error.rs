//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("{op}: shape mismatch: {left} vs {right}")]
    ShapeMismatch { op: String, left: String, right: String },

    /// A precondition on an operation's arguments failed.
    #[error("{op}: {msg}")]
    Invalid { op: String, msg: String },

    /// `backward` was asked to differentiate a non-scalar node.
    #[error("backward: root must be scalar, got {shape}")]
    NonScalarRoot { shape: String },

    /// A node handle does not belong to the graph it was used with.
    #[error("graph: node {id} is not part of this graph")]
    NotInGraph { id: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A binary or text file failed to parse; `offset` is the byte position.
    #[error("{path}: malformed {format} at byte {offset}: {msg}")]
    Malformed {
        path: PathBuf,
        format: &'static str,
        offset: usize,
        msg: String,
    },

    #[error("{path}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },

    #[error("config: unknown key '{key}'")]
    UnknownConfigKey { key: String },

    #[error("config: invalid value for '{key}': {msg}")]
    ConfigValue { key: String, msg: String },

    #[error("manifest: {msg}")]
    Manifest { msg: String },
}

impl Error {
    pub fn invalid(op: &str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op: op.to_string(),
            msg: msg.into(),
        }
    }

    pub fn shape(op: &str, left: impl std::fmt::Display, right: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
