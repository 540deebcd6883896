//! Corpus manifests: JSON lines of `{"id", "path", "split"}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot access manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

/// Read a JSON-lines file of `T`, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ManifestError> {
    let io = |source| ManifestError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|source| ManifestError::Parse { path: path.display().to_string(), line: n + 1, source })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ManifestError> {
    let io = |source| ManifestError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for row in rows {
        let line = serde_json::to_string(row).expect("manifest rows serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Load a corpus manifest. Relative image paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<CorpusEntry>, ManifestError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries: Vec<CorpusEntry> = read_jsonl(path)?;
    for e in entries.iter_mut() {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[CorpusEntry]) -> Result<(), ManifestError> {
    write_jsonl(path, entries)
}
