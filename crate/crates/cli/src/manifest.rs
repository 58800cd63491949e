//! Run manifests. The hash covers the tool version, the stage, the config
//! (without file paths), the parent manifest and the content digests of all
//! input files. Timestamps live only in the sidecar and never enter the hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ctxtrace_core::{Error, FileHeader, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest: String,
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub parent: Option<String>,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl RunManifest {
    /// `inputs` pairs a role name with a file; the parent manifest is taken
    /// from the header of the `parent_input` file when it has one.
    pub fn new(
        stage: &str,
        config: &RunConfig,
        inputs: &[(&str, &Path)],
        parent_input: Option<&Path>,
    ) -> Result<Self> {
        let canonical = serde_json::to_vec(&config.without_paths())
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        let config_hash = hex::encode(Sha256::digest(&canonical));

        let mut digests = BTreeMap::new();
        for (role, path) in inputs {
            digests.insert(role.to_string(), file_digest(path)?);
        }
        let parent = match parent_input {
            Some(p) => ctxtrace_core::io::read_header(p)?.map(|h| h.manifest),
            None => None,
        };

        let mut h = Sha256::new();
        for part in [TOOL_VERSION, stage, &config_hash, parent.as_deref().unwrap_or("-")] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        for (role, digest) in &digests {
            h.update(role.as_bytes());
            h.update([b'=']);
            h.update(digest.as_bytes());
            h.update([0]);
        }
        Ok(Self {
            manifest: hex::encode(h.finalize()),
            stage: stage.to_owned(),
            tool_version: TOOL_VERSION.to_owned(),
            config_hash,
            parent,
            seed: config.seed,
            inputs: digests,
            started_at: unix_now(),
            finished_at: None,
        })
    }

    pub fn header(&self) -> FileHeader {
        FileHeader {
            manifest: self.manifest.clone(),
            parent: self.parent.clone(),
            seed: self.seed,
        }
    }

    pub fn sidecar_path(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    /// Stamps the finish time and writes `<output>.manifest.json`.
    pub fn write_sidecar(&mut self, output: &Path) -> Result<()> {
        self.finished_at = Some(unix_now());
        let path = Self::sidecar_path(output);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("serializing manifest: {e}")))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })
    }
}
