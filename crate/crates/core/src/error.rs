use std::io;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum AsrError {
    /// A caller broke an operation's precondition (shape, range, length).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A non-finite value appeared where a finite one is required.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Whole-layout rejection sampling gave up.
    #[error("no feasible layout for n={n} boxes of side {side} on a {size}x{size} canvas after {attempts} attempts")]
    Infeasible { n: usize, size: usize, side: f64, attempts: usize },
    #[error("configuration error: {0}")]
    Config(String),
    /// A file was readable but its contents are malformed or truncated.
    #[error("corrupt {what}: {detail}")]
    Corrupt { what: &'static str, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl AsrError {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        AsrError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn corrupt(what: &'static str, detail: impl Into<String>) -> Self {
        AsrError::Corrupt { what, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, AsrError>;
