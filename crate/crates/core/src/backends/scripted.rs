//! Deterministic table-lookup model used as a test oracle and for offline runs.
//!
//! Lookup key is `(question_id, mode, context_fingerprint, target_words)`.
//! A request with a fingerprint falls back to the entry with a null
//! fingerprint, and a generation request with a target falls back to the
//! entry with no target, so order-agnostic or length-agnostic fixtures need
//! only one line.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mode, ModelRequest, TextModel};
use crate::error::{Error, Result};
use crate::io::read_jsonl;

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub question_id: String,
    pub mode: Mode,
    #[serde(default)]
    pub context_fingerprint: Option<String>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_words: Option<u32>,
}

type Key = (String, Mode, Option<String>, Option<u32>);

#[derive(Debug, Clone, Default)]
pub struct Script {
    entries: HashMap<Key, String>,
}

impl Script {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Result<Self> {
        let mut map = HashMap::new();
        for e in entries {
            let key = (e.question_id, e.mode, e.context_fingerprint, e.target_words);
            if map.contains_key(&key) {
                return Err(Error::Validation(format!("duplicate script entry {key:?}")));
            }
            map.insert(key, e.answer);
        }
        Ok(Self { entries: map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rows = read_jsonl::<ScriptEntry>(path)?;
        let mut map = HashMap::new();
        for row in rows {
            let e = row.value;
            let key = (e.question_id, e.mode, e.context_fingerprint, e.target_words);
            if map.contains_key(&key) {
                return Err(Error::Validation(format!(
                    "{}:{}: duplicate script entry for {:?} ({})",
                    path.display(),
                    row.line,
                    key.0,
                    key.1
                )));
            }
            map.insert(key, e.answer);
        }
        Ok(Self { entries: map })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scripted_answer(
        &self,
        question_id: &str,
        mode: Mode,
        context_fingerprint: Option<&str>,
        target_words: Option<u32>,
    ) -> Result<&str> {
        let get = |fp: Option<&str>, n: Option<u32>| {
            self.entries
                .get(&(question_id.to_owned(), mode, fp.map(str::to_owned), n))
        };
        get(context_fingerprint, target_words)
            .or_else(|| context_fingerprint.and_then(|_| get(None, target_words)))
            .or_else(|| target_words.and_then(|_| get(context_fingerprint, None)))
            .or_else(|| {
                (context_fingerprint.is_some() && target_words.is_some())
                    .then(|| get(None, None))
                    .flatten()
            })
            .map(String::as_str)
            .ok_or_else(|| Error::ScriptMiss {
                question_id: question_id.to_owned(),
                mode: mode.to_string(),
                fingerprint: context_fingerprint.map(str::to_owned),
            })
    }
}

pub struct ScriptedModel {
    name: String,
    script: Script,
}

impl ScriptedModel {
    pub fn new(name: impl Into<String>, script: Script) -> Self {
        Self {
            name: name.into(),
            script,
        }
    }

    pub fn from_file(name: impl Into<String>, path: &Path) -> Result<Self> {
        Ok(Self::new(name, Script::load(path)?))
    }
}

impl TextModel for ScriptedModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &ModelRequest) -> Result<String> {
        self.script
            .scripted_answer(
                &request.question_id,
                request.mode,
                request.context_fingerprint.as_deref(),
                request.target_words,
            )
            .map(str::to_owned)
    }
}
