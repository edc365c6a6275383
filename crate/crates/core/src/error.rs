use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed file content. `offset` is the byte position where the problem was detected.
    #[error("format error at byte {offset}{}: {message}", record_suffix(.record))]
    Format {
        offset: u64,
        record: Option<String>,
        message: String,
    },

    #[error("checksum mismatch in record {record} at byte {offset}")]
    Checksum { record: String, offset: u64 },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("internal error: {0}")]
    Internal(String),

    /// Training produced a non-finite loss. `dump` is a JSON diagnostic of the offending batch.
    #[error("training diverged at step {step}: {message}")]
    Diverged {
        step: usize,
        message: String,
        dump: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn record_suffix(record: &Option<String>) -> String {
    match record {
        Some(r) => format!(" (record {r})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn format(offset: u64, record: Option<&str>, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            record: record.map(str::to_owned),
            message: message.into(),
        }
    }

    /// True for errors caused by bad inputs (files, ids, settings) rather than by a failure
    /// while doing the work.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Format { .. }
            | Error::Checksum { .. }
            | Error::Ingestion(_)
            | Error::NotFound(_)
            | Error::Config(_)
            | Error::Dimension(_) => true,
            Error::Io(e) => e.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
