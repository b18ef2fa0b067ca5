use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("span [{start}, {end}) out of bounds for text of {len} chars")]
    Bounds {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error(transparent)]
    Provider(#[from] ProviderError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when a model provider failed, as opposed to bad input data,
    /// configuration or local I/O.
    pub fn is_provider(&self) -> bool {
        matches!(self, Error::Provider(_))
    }
}

/// Failure talking to an embedding, rerank, or generation backend.
#[derive(Debug, Error)]
pub enum ProviderError {
    /// Network-level failure; worth retrying.
    #[error("{provider}: transport error: {message}")]
    Transport { provider: String, message: String },

    /// The backend answered with an HTTP status we cannot recover from.
    #[error("{provider}: HTTP {status}: {body}")]
    Status {
        provider: String,
        status: u16,
        body: String,
    },

    /// The backend answered but the payload violates the wire contract.
    #[error("{provider}: protocol error: {message}")]
    Protocol { provider: String, message: String },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport { .. } => true,
            ProviderError::Status { status, .. } => *status == 503 || *status == 429,
            ProviderError::Protocol { .. } => false,
        }
    }
}
