//! Error types shared across the pipeline.

use std::path::PathBuf;

/// One invalid field in a corpus record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldViolation {
    pub record_id: String,
    pub field: &'static str,
    pub reason: String,
}

impl std::fmt::Display for FieldViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "record `{}` field `{}`: {}", self.record_id, self.field, self.reason)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{} validation error(s): {}", .0.len(), join_violations(.0))]
    Validation(Vec<FieldViolation>),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("sequence of {len} tokens exceeds the context window of {limit}{}", record_suffix(.record))]
    ContextOverflow {
        len: usize,
        limit: usize,
        record: Option<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("annotation failed after {attempts} attempt(s): {message}")]
    Annotation { attempts: u32, message: String },

    #[error("quarantine rate {rejected}/{total} exceeds the 20% limit; first reasons: {summary}")]
    QuarantineLimit {
        rejected: usize,
        total: usize,
        summary: String,
    },

    #[error("data alignment error: {0}")]
    Alignment(String),

    #[error("training diverged at step {step}: {message}")]
    NonFinite {
        step: usize,
        message: String,
        /// Parameters after the last finite step.
        last_good: Option<Box<crate::policy::Checkpoint>>,
    },

    #[error("no usable preference pairs: {0}")]
    NoPairs(String),

    #[error("judge error: {0}")]
    Judge(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

fn join_violations(v: &[FieldViolation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

fn record_suffix(record: &Option<String>) -> String {
    match record {
        Some(id) => format!(" (record `{id}`)"),
        None => String::new(),
    }
}
