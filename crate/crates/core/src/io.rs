//! JSONL reading and writing with the one-line provenance header that every
//! output file starts with.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const HEADER_PREFIX: &str = "# ctxtrace";

/// Provenance line: `# ctxtrace manifest=<hex> parent=<hex|-> seed=<int>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileHeader {
    pub manifest: String,
    pub parent: Option<String>,
    pub seed: u64,
}

impl fmt::Display for FileHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{HEADER_PREFIX} manifest={} parent={} seed={}",
            self.manifest,
            self.parent.as_deref().unwrap_or("-"),
            self.seed
        )
    }
}

impl FileHeader {
    pub fn parse(line: &str) -> Option<Self> {
        let rest = line.trim_end().strip_prefix(HEADER_PREFIX)?;
        let mut manifest = None;
        let mut parent = None;
        let mut seed = None;
        for field in rest.split_whitespace() {
            let (key, value) = field.split_once('=')?;
            match key {
                "manifest" => manifest = Some(value.to_owned()),
                "parent" => parent = Some((value != "-").then(|| value.to_owned())),
                "seed" => seed = value.parse().ok(),
                _ => {}
            }
        }
        Some(Self {
            manifest: manifest?,
            parent: parent?,
            seed: seed?,
        })
    }
}

/// Reads the header of a file if its first line carries one.
pub fn read_header(path: &Path) -> Result<Option<FileHeader>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    Ok(FileHeader::parse(&first))
}

/// A parsed JSONL row and its 1-based line number.
#[derive(Debug, Clone)]
pub struct Row<T> {
    pub line: usize,
    pub value: T,
}

/// Reads a JSONL file, skipping blank lines and `#` comment lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<Row<T>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let value = serde_json::from_str(trimmed).map_err(|e| Error::Schema {
            path: path.to_owned(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        rows.push(Row {
            line: idx + 1,
            value,
        });
    }
    Ok(rows)
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    header: Option<&FileHeader>,
    rows: impl IntoIterator<Item = T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(h) = header {
        writeln!(out, "{h}").map_err(io)?;
    }
    for row in rows {
        let line = serde_json::to_string(&row)
            .map_err(|e| Error::Validation(format!("serializing row: {e}")))?;
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}
