use std::path::PathBuf;

/// Errors raised by the library.
///
/// Every variant maps onto a short diagnostic category (see [`Error::category`])
/// which the CLI prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("corrupt label: {0}")]
    Integrity(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("pre-fit failed: {0}")]
    PreFit(String),

    #[error("empty report: {0}")]
    EmptyReport(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("plot error: {0}")]
    Plot(String),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidSequence(_) => "invalid-sequence",
            Error::Config(_) => "config",
            Error::EmptyDataset(_) => "empty-dataset",
            Error::Integrity(_) => "integrity",
            Error::Oracle(_) => "oracle",
            Error::Checkpoint(_) => "checkpoint",
            Error::PreFit(_) => "prefit",
            Error::EmptyReport(_) => "empty-report",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
            Error::Plot(_) => "plot",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
