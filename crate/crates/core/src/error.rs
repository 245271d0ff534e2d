use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    /// The scene exposes fewer primitives than it has labelled classes, so no
    /// injective class-to-primitive assignment exists.
    #[error("unmatchable scene: {primitives} present primitives for {classes} present classes")]
    UnmatchableScene { primitives: usize, classes: usize },

    #[error("co-occurrence policy could not be satisfied after {attempts} resamples")]
    PolicyUnsatisfiable { attempts: usize },

    #[error("{0}")]
    Cooccurrence(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
