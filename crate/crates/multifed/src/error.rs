//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violates one of its documented invariants.
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    #[error("{0} set is empty")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("duplicate loss entry for client {client}, model {model} at round {round}")]
    DuplicateEntry {
        client: usize,
        model: usize,
        round: u64,
    },

    #[error("no loss observation for client {client}, model {model} before round {round}")]
    MissingHistory {
        client: usize,
        model: usize,
        round: u64,
    },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("failed to parse {what}: {why}")]
    Parse { what: String, why: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            why: why.into(),
        }
    }

    pub fn parse(what: impl Into<String>, why: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            why: why.into(),
        }
    }

    /// Wraps an I/O error with the path or action it came from.
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| Error::Io { context, source }
    }
}
