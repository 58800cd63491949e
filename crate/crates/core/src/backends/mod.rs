//! Readers, generators and retrievers.
//!
//! Readers and generators both implement [`TextModel`]; the request carries
//! the rendered prompt for HTTP models and the lookup key for the scripted
//! oracle. Retrievers implement [`Retriever`] and return a single top-1 hit.

use std::hash::Hasher;
use std::str::FromStr;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textnorm::normalize_answer;

pub mod bm25;
pub mod golden;
pub mod http;
pub mod ingest;
pub mod scripted;

pub use bm25::{Bm25Index, Bm25Params, Document};
pub use golden::GoldenRetriever;
pub use http::{HttpModel, HttpResponse, RateLimiter, Transport, UreqTransport};
pub use ingest::{ingest_retrieval, IngestedRetriever};
pub use scripted::{Script, ScriptEntry, ScriptedModel};

/// What a model call is for. Scripted lookups key on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ClosedBook,
    SingleContext,
    Hybrid,
    Generate,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ClosedBook => "closed_book",
            Mode::SingleContext => "single_context",
            Mode::Hybrid => "hybrid",
            Mode::Generate => "generate",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One call to a reader or generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub question_id: String,
    pub mode: Mode,
    pub prompt: String,
    /// Fingerprint of the context block (single-context and hybrid reads).
    pub context_fingerprint: Option<String>,
    /// Requested length `n` for generation calls; `None` for unconstrained generation.
    pub target_words: Option<u32>,
}

pub trait TextModel: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &ModelRequest) -> Result<String>;
}

/// A retriever's top-ranked passage, before wrapping into a context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedHit {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub score: f64,
}

impl RetrievedHit {
    pub(crate) fn validate(&self) -> std::result::Result<(), String> {
        if !self.score.is_finite() {
            return Err(format!("hit {:?} has non-finite score", self.doc_id));
        }
        if self.body.trim().is_empty() {
            return Err(format!("hit {:?} has an empty body", self.doc_id));
        }
        Ok(())
    }
}

pub trait Retriever: Send + Sync {
    fn name(&self) -> &str;
    fn top1(&self, question_id: &str, question: &str) -> Result<RetrievedHit>;
}

/// Lowercase hex of the 64-bit FNV-1a hash of the normalized text.
pub fn context_fingerprint(text: &str) -> String {
    let mut hasher = FnvHasher::default();
    hasher.write(normalize_answer(text).as_bytes());
    format!("{:016x}", hasher.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
}

/// Reader or generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub temperature: f64,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub script_path: Option<std::path::PathBuf>,
    /// Base delay of the exponential backoff, in milliseconds.
    pub backoff_ms: u64,
    /// Upper bound on request rate shared by all workers; `None` disables limiting.
    pub requests_per_second: Option<f64>,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            model_name: None,
            temperature: 0.0,
            timeout_secs: 60.0,
            max_retries: 3,
            script_path: None,
            backoff_ms: 500,
            requests_per_second: None,
        }
    }
}

impl BackendSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if !(self.timeout_secs > 0.0) || !self.timeout_secs.is_finite() {
            return Err(Error::Config(format!(
                "timeout {} must be positive",
                self.timeout_secs
            )));
        }
        if let Some(rps) = self.requests_per_second {
            if !(rps > 0.0) {
                return Err(Error::Config(format!("requests_per_second {rps} must be positive")));
            }
        }
        match self.kind {
            BackendKind::Http => {
                if self.endpoint.is_none() || self.model_name.is_none() {
                    return Err(Error::Config(
                        "http backend needs both endpoint and model_name".into(),
                    ));
                }
            }
            BackendKind::Scripted => {
                if self.script_path.is_none() {
                    return Err(Error::Config("scripted backend needs script_path".into()));
                }
            }
        }
        Ok(())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_book" => Ok(Mode::ClosedBook),
            "single_context" => Ok(Mode::SingleContext),
            "hybrid" => Ok(Mode::Hybrid),
            "generate" => Ok(Mode::Generate),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}
