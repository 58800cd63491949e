//! Human-annotated gold passages standing in for an ideal retriever.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use super::{RetrievedHit, Retriever};
use crate::error::{Error, Result};
use crate::io::read_jsonl;

/// Gold-passage annotation line. `score` is accepted and ignored; gold hits
/// always carry score 1.0.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoldRow {
    question_id: String,
    doc_id: String,
    title: String,
    body: String,
    #[serde(default)]
    #[allow(dead_code)]
    score: Option<serde_json::Value>,
}

pub struct GoldenRetriever {
    hits: HashMap<String, RetrievedHit>,
}

impl GoldenRetriever {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut hits = HashMap::new();
        for row in read_jsonl::<GoldRow>(path)? {
            let r = row.value;
            if hits.contains_key(&r.question_id) {
                log::warn!(
                    "{}:{}: duplicate gold annotation for {:?}; keeping the first",
                    path.display(),
                    row.line,
                    r.question_id
                );
                continue;
            }
            let hit = RetrievedHit {
                doc_id: r.doc_id,
                title: r.title,
                body: r.body,
                score: 1.0,
            };
            hit.validate().map_err(|message| Error::Schema {
                path: path.to_owned(),
                line: row.line,
                message,
            })?;
            hits.insert(r.question_id, hit);
        }
        Ok(Self { hits })
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn golden_retrieve(&self, question_id: &str) -> Result<RetrievedHit> {
        self.hits
            .get(question_id)
            .cloned()
            .ok_or_else(|| Error::NoHit(format!("no gold passage for question {question_id:?}")))
    }
}

impl Retriever for GoldenRetriever {
    fn name(&self) -> &str {
        "gold"
    }

    fn top1(&self, question_id: &str, _question: &str) -> Result<RetrievedHit> {
        self.golden_retrieve(question_id)
    }
}
