//! Okapi BM25 over an in-memory corpus.
//!
//! score(q, d) = Σ_t IDF(t) · tf·(k1+1) / (tf + k1·(1 − b + b·|d|/avgdl))
//! IDF(t)      = ln((N − df + 0.5)/(df + 0.5) + 1)
//!
//! Query terms are a multiset: a repeated term contributes once per occurrence.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RetrievedHit, Retriever};
use crate::error::{Error, Result};
use crate::io::read_jsonl;
use crate::textnorm;

/// Dropped from index and query tokens. Never applied to answer matching.
pub const STOPWORDS: &[&str] = &[
    "and", "or", "of", "to", "in", "on", "at", "by", "for", "with", "from", "is", "are", "was",
    "were", "be", "been", "it", "its", "as", "that", "this", "which", "who", "whom", "what",
    "when", "where", "why", "how", "did", "do", "does", "has", "have", "had",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub corpus_path: Option<PathBuf>,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: 1.2,
            b: 0.75,
            corpus_path: None,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0) || !self.k1.is_finite() {
            return Err(Error::Config(format!("bm25 k1 {} must be > 0", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("bm25 b {} outside [0, 1]", self.b)));
        }
        Ok(())
    }
}

/// One line of `corpus.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

pub fn index_tokens(text: &str) -> Vec<String> {
    textnorm::tokens(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

struct Posting {
    doc: usize,
    tf: u32,
}

/// Immutable BM25 index.
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<Document>,
    doc_lens: Vec<usize>,
    avgdl: f64,
    postings: HashMap<String, Vec<Posting>>,
}

impl Bm25Index {
    pub fn build(params: Bm25Params, docs: Vec<Document>) -> Result<Self> {
        params.validate()?;
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lens = Vec::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            let tokens = index_tokens(&format!("{} {}", doc.title, doc.text));
            doc_lens.push(tokens.len());
            let mut tf: HashMap<&str, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, tf) in tf {
                postings
                    .entry(term.to_owned())
                    .or_default()
                    .push(Posting { doc: i, tf });
            }
        }
        let total: usize = doc_lens.iter().sum();
        let avgdl = if docs.is_empty() {
            0.0
        } else {
            total as f64 / docs.len() as f64
        };
        Ok(Self {
            params,
            docs,
            doc_lens,
            avgdl,
            postings,
        })
    }

    /// Loads `corpus.jsonl` from `params.corpus_path`.
    pub fn from_corpus_file(params: Bm25Params) -> Result<Self> {
        let path = params
            .corpus_path
            .clone()
            .ok_or_else(|| Error::Config("bm25 retriever needs corpus_path".into()))?;
        let docs = load_corpus(&path)?;
        Self::build(params, docs)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn params(&self) -> &Bm25Params {
        &self.params
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, idf: f64, tf: f64, doc_len: usize) -> f64 {
        let Bm25Params { k1, b, .. } = self.params;
        let norm = 1.0 - b + b * doc_len as f64 / self.avgdl;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// BM25 score of document `doc` (position in the corpus) for the query tokens.
    pub fn score(&self, query_tokens: &[String], doc: usize) -> f64 {
        let mut score = 0.0;
        for term in query_tokens {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            if let Some(p) = list.iter().find(|p| p.doc == doc) {
                score += self.term_weight(self.idf(term), p.tf as f64, self.doc_lens[doc]);
            }
        }
        score
    }

    /// Scores for every document, accumulated term by term from the postings.
    pub fn score_all(&self, query_tokens: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.docs.len()];
        for term in query_tokens {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for p in list {
                scores[p.doc] += self.term_weight(idf, p.tf as f64, self.doc_lens[p.doc]);
            }
        }
        scores
    }

    /// Highest-scoring document; ties go to the smallest `doc_id`.
    pub fn top1(&self, question: &str) -> Result<RetrievedHit> {
        if self.docs.is_empty() {
            return Err(Error::NoHit("bm25 corpus is empty".into()));
        }
        let query = index_tokens(question);
        let scores = self.score_all(&query);
        let best = (0..self.docs.len())
            .min_by(|&a, &b| {
                scores[b]
                    .total_cmp(&scores[a])
                    .then_with(|| self.docs[a].doc_id.cmp(&self.docs[b].doc_id))
            })
            .expect("non-empty corpus");
        let doc = &self.docs[best];
        Ok(RetrievedHit {
            doc_id: doc.doc_id.clone(),
            title: doc.title.clone(),
            body: doc.text.clone(),
            score: scores[best],
        })
    }
}

impl Retriever for Bm25Index {
    fn name(&self) -> &str {
        "bm25"
    }

    fn top1(&self, _question_id: &str, question: &str) -> Result<RetrievedHit> {
        Bm25Index::top1(self, question)
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let rows = read_jsonl::<Document>(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut docs = Vec::with_capacity(rows.len());
    for row in rows {
        if !seen.insert(row.value.doc_id.clone()) {
            return Err(Error::Schema {
                path: path.to_owned(),
                line: row.line,
                message: format!("duplicate doc_id {:?}", row.value.doc_id),
            });
        }
        docs.push(row.value);
    }
    Ok(docs)
}
