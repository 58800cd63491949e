use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across dataset construction, backends, metrics and analysis.
#[derive(Debug, Error)]
pub enum Error {
    /// `contains_answer` was asked about an answer with no tokens.
    #[error("empty answer: a candidate answer must contain at least one token")]
    EmptyAnswer,

    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    BackendUnavailable { attempts: u32, reason: String },

    #[error("backend rejected request with status {status}: {body}")]
    BackendRejected { status: u16, body: String },

    #[error("backend returned an empty response{}", context_suffix(.context))]
    EmptyResponse { context: Option<String> },

    #[error("script miss: no entry for question {question_id:?} in mode {mode}{}", fingerprint_suffix(.fingerprint))]
    ScriptMiss {
        question_id: String,
        mode: String,
        fingerprint: Option<String>,
    },

    #[error("no hit: {0}")]
    NoHit(String),

    #[error("{}:{line}: schema error: {message}", path.display())]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failure: {0}")]
    Validation(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing score: {0}")]
    MissingScore(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn context_suffix(context: &Option<String>) -> String {
    context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default()
}

fn fingerprint_suffix(fingerprint: &Option<String>) -> String {
    fingerprint
        .as_ref()
        .map(|f| format!(" with fingerprint {f}"))
        .unwrap_or_default()
}

impl Error {
    /// True for failures that originate in a reader, generator or retriever.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::BackendUnavailable { .. }
                | Error::BackendRejected { .. }
                | Error::EmptyResponse { .. }
                | Error::ScriptMiss { .. }
                | Error::NoHit(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
