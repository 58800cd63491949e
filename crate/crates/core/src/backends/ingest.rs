//! Precomputed retrieval results (e.g. a dense retriever's top-1 passages)
//! loaded from JSONL instead of computed natively.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RetrievedHit, Retriever};
use crate::error::{Error, Result};
use crate::io::read_jsonl;

/// One line of a retrieval-results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalRow {
    pub question_id: String,
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub score: f64,
}

/// Loads retrieval results, one hit per question. Duplicate question ids fail.
pub fn ingest_retrieval(path: &Path) -> Result<HashMap<String, RetrievedHit>> {
    let mut hits = HashMap::new();
    for row in read_jsonl::<RetrievalRow>(path)? {
        let r = row.value;
        let hit = RetrievedHit {
            doc_id: r.doc_id,
            title: r.title,
            body: r.body,
            score: r.score,
        };
        hit.validate().map_err(|message| Error::Schema {
            path: path.to_owned(),
            line: row.line,
            message,
        })?;
        if hits.insert(r.question_id.clone(), hit).is_some() {
            return Err(Error::Validation(format!(
                "{}:{}: duplicate question_id {:?}",
                path.display(),
                row.line,
                r.question_id
            )));
        }
    }
    Ok(hits)
}

pub struct IngestedRetriever {
    name: String,
    hits: HashMap<String, RetrievedHit>,
}

impl IngestedRetriever {
    pub fn new(name: impl Into<String>, hits: HashMap<String, RetrievedHit>) -> Self {
        Self {
            name: name.into(),
            hits,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::new("ingest", ingest_retrieval(path)?))
    }
}

impl Retriever for IngestedRetriever {
    fn name(&self) -> &str {
        &self.name
    }

    fn top1(&self, question_id: &str, _question: &str) -> Result<RetrievedHit> {
        self.hits
            .get(question_id)
            .cloned()
            .ok_or_else(|| Error::NoHit(format!("no ingested result for question {question_id:?}")))
    }
}
