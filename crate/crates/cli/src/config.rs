//! Run configuration: one JSON document, with dotted-path overrides applied
//! before deserialization and canonical flags applied after.

use std::path::{Path, PathBuf};

use ctxtrace_core::analysis::{DEFAULT_MATCH_THRESHOLD, DEFAULT_SLICES};
use ctxtrace_core::backends::{
    Bm25Index, BackendKind, BackendSpec, Bm25Params, GoldenRetriever, HttpModel,
    IngestedRetriever, Retriever, ScriptedModel, TextModel,
};
use ctxtrace_core::pipeline::{PipelineConfig, Prompts, DEFAULT_ABSTENTIONS, DEFAULT_LENGTH_CANDIDATES};
use ctxtrace_core::{Aggregation, Error, OrderMode, Result, SimMetric};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Bm25,
    Golden,
    Ingest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverConfig {
    pub kind: RetrieverKind,
    pub bm25: Bm25Params,
    /// Gold passages (`golden`) or precomputed top-1 hits (`ingest`).
    pub path: Option<PathBuf>,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            kind: RetrieverKind::Bm25,
            bm25: Bm25Params::default(),
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub reader: BackendSpec,
    pub generator: BackendSpec,
    pub retriever: RetrieverConfig,
    pub order: OrderMode,
    pub seed: u64,
    pub workers: usize,
    pub length_candidates: Vec<u32>,
    pub abstention_set: Vec<String>,
    pub prompts: Prompts,
    pub slice_count: usize,
    pub sim_metric: SimMetric,
    pub aggregation: Aggregation,
    pub match_threshold: f64,
    /// Externally computed similarity scores, required when `sim_metric` is `external`.
    pub similarity_scores: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            reader: BackendSpec::default(),
            generator: BackendSpec::default(),
            retriever: RetrieverConfig::default(),
            order: OrderMode::Random,
            seed: 0,
            workers: 1,
            length_candidates: DEFAULT_LENGTH_CANDIDATES.to_vec(),
            abstention_set: DEFAULT_ABSTENTIONS.iter().map(|s| s.to_string()).collect(),
            prompts: Prompts::default(),
            slice_count: DEFAULT_SLICES,
            sim_metric: SimMetric::Jaccard,
            aggregation: Aggregation::Max,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            similarity_scores: None,
        }
    }
}

/// Sets `path` (dot-separated keys) in a JSON object tree, creating
/// intermediate objects. The value is parsed as JSON when possible and kept
/// as a string otherwise, so `seed=7` is a number and `order=random` a string.
pub fn set_dotted(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key {path:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?} descends into a non-object")))?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {path:?} descends into a non-object")))?
        .insert(keys[keys.len() - 1].to_owned(), value);
    Ok(())
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Reads the config file (if any), applies `key=value` overrides and
    /// resolves relative paths in the file against the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_owned(),
                    source: e,
                })?;
                serde_json::from_str(&text).map_err(|e| Error::Schema {
                    path: p.to_owned(),
                    line: e.line(),
                    message: e.to_string(),
                })?
            }
            None => Value::Object(Default::default()),
        };
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut config: RunConfig = serde_json::from_value(doc.clone())
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        if let Some(base) = path.and_then(Path::parent) {
            config.resolve_paths(base);
        }
        // Override values are relative to the working directory, so they are
        // applied on top of the already-resolved file paths.
        if !overrides.is_empty() {
            doc = serde_json::to_value(&config).map_err(|e| Error::Config(e.to_string()))?;
            for o in overrides {
                let (key, value) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
                set_dotted(&mut doc, key.trim(), value)?;
            }
            config = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override: {e}")))?;
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.reader.script_path);
        resolve(base, &mut self.generator.script_path);
        resolve(base, &mut self.retriever.bm25.corpus_path);
        resolve(base, &mut self.retriever.path);
        resolve(base, &mut self.similarity_scores);
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.length_candidates.is_empty() || self.length_candidates.contains(&0) {
            return Err(Error::Config("length_candidates must be non-empty positive counts".into()));
        }
        if self.slice_count == 0 {
            return Err(Error::Config("slice_count must be at least 1".into()));
        }
        if !(self.match_threshold >= 0.0) {
            return Err(Error::Config(format!(
                "match_threshold {} must be non-negative",
                self.match_threshold
            )));
        }
        self.retriever.bm25.validate()
    }

    /// The config with every file path removed. File contents enter the run
    /// manifest as digests instead, so moving a run directory keeps its hash.
    pub fn without_paths(&self) -> Self {
        let mut c = self.clone();
        c.reader.script_path = None;
        c.generator.script_path = None;
        c.retriever.bm25.corpus_path = None;
        c.retriever.path = None;
        c.similarity_scores = None;
        c
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            prompts: self.prompts.clone(),
            abstention_set: self.abstention_set.clone(),
            length_candidates: self.length_candidates.clone(),
            workers: self.workers,
        }
    }

    /// Files the run reads besides its stage input, keyed by role.
    pub fn input_files(&self) -> Vec<(&'static str, &Path)> {
        let retrieval = match self.retriever.kind {
            RetrieverKind::Bm25 => ("corpus", &self.retriever.bm25.corpus_path),
            RetrieverKind::Golden | RetrieverKind::Ingest => ("retrieval", &self.retriever.path),
        };
        let mut candidates = vec![
            ("reader_script", &self.reader.script_path),
            ("generator_script", &self.generator.script_path),
            retrieval,
        ];
        if self.sim_metric == SimMetric::External {
            candidates.push(("similarity_scores", &self.similarity_scores));
        }
        let files = candidates
            .into_iter()
            .filter_map(|(role, p)| p.as_deref().map(|p| (role, p)))
            .collect();
        files
    }
}

pub fn build_model(role: &str, spec: &BackendSpec) -> Result<Box<dyn TextModel>> {
    spec.validate()?;
    let name = spec.model_name.clone().unwrap_or_else(|| format!("scripted-{role}"));
    Ok(match spec.kind {
        BackendKind::Scripted => {
            let path = spec.script_path.as_deref().expect("validated scripted spec");
            Box::new(ScriptedModel::from_file(name, path)?)
        }
        BackendKind::Http => Box::new(HttpModel::from_spec(name, spec)?),
    })
}

pub fn build_retriever(config: &RetrieverConfig) -> Result<Box<dyn Retriever>> {
    let path = || {
        config
            .path
            .as_deref()
            .ok_or_else(|| Error::Config("retriever.path is required for golden and ingest".into()))
    };
    Ok(match config.kind {
        RetrieverKind::Bm25 => Box::new(Bm25Index::from_corpus_file(config.bm25.clone())?),
        RetrieverKind::Golden => Box::new(GoldenRetriever::from_file(path()?)?),
        RetrieverKind::Ingest => Box::new(IngestedRetriever::from_file(path()?)?),
    })
}
