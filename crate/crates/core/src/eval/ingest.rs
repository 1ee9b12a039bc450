//! Snippet JSONL ingestion into a silo directory.
//!
//! Accepts `{"text", "source", "meta"}` rows as well as MedRAG-style
//! `{"id", "title", "content" | "contents"}` rows.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedder;
use crate::index::{load_index, save_index, DocumentSnippet, FlatIndex, IndexError, SnippetStore};

pub const INDEX_FILE: &str = "index.frix";
pub const STORE_FILE: &str = "snippets.jsonl";

/// Largest tolerated share of malformed lines, in percent.
pub const MAX_MALFORMED_PERCENT: usize = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{malformed} of {total} lines malformed (lines {lines:?})")]
    TooManyMalformed {
        malformed: usize,
        total: usize,
        lines: Vec<usize>,
    },
    #[error("no snippets in {0}")]
    Empty(PathBuf),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Deserialize)]
struct RawSnippet {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    contents: Option<String>,
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    meta: Option<serde_json::Map<String, serde_json::Value>>,
}

impl RawSnippet {
    fn into_snippet(self, default_source: &str) -> Option<DocumentSnippet> {
        let text = self.text.or(self.contents).or(self.content)?;
        if text.trim().is_empty() {
            return None;
        }
        let source = self.source.unwrap_or_else(|| default_source.to_string());
        let mut meta: BTreeMap<String, String> = self
            .meta
            .unwrap_or_default()
            .into_iter()
            .map(|(k, v)| match v {
                serde_json::Value::String(s) => (k, s),
                other => (k, other.to_string()),
            })
            .collect();
        if let Some(id) = self.id {
            meta.insert("id".into(), id);
        }
        if let Some(title) = self.title {
            meta.insert("title".into(), title);
        }
        let snippet = DocumentSnippet::new(text, source).ok()?;
        Some(if meta.is_empty() { snippet } else { snippet.with_meta(meta) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCorpus {
    /// In file order, duplicates removed.
    pub snippets: Vec<DocumentSnippet>,
    /// Non-blank lines seen.
    pub lines: usize,
    /// 1-based line numbers that did not parse.
    pub malformed: Vec<usize>,
    pub duplicates: usize,
}

/// Reads a snippet file. Blank lines are ignored; malformed lines are
/// skipped unless they exceed [`MAX_MALFORMED_PERCENT`].
pub fn read_snippets(path: &Path, default_source: &str) -> Result<ParsedCorpus, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut seen = HashSet::new();
    let mut parsed = ParsedCorpus {
        snippets: Vec::new(),
        lines: 0,
        malformed: Vec::new(),
        duplicates: 0,
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        parsed.lines += 1;
        let snippet = serde_json::from_str::<RawSnippet>(&line)
            .ok()
            .and_then(|raw| raw.into_snippet(default_source));
        match snippet {
            Some(s) if seen.insert(s.doc_id) => parsed.snippets.push(s),
            Some(_) => parsed.duplicates += 1,
            None => parsed.malformed.push(i + 1),
        }
    }
    if parsed.malformed.len() * 100 > parsed.lines * MAX_MALFORMED_PERCENT {
        return Err(IngestError::TooManyMalformed {
            malformed: parsed.malformed.len(),
            total: parsed.lines,
            lines: parsed.malformed,
        });
    }
    if !parsed.malformed.is_empty() {
        tracing::warn!(path = %path.display(), lines = ?parsed.malformed, "skipped malformed snippet lines");
    }
    Ok(parsed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub silo_id: String,
    pub lines: usize,
    /// Snippets newly added to the index.
    pub added: usize,
    /// Lines whose text was already in the file or the index.
    pub duplicates: usize,
    pub malformed: usize,
    /// Index size after ingestion.
    pub index_count: usize,
    pub index_path: PathBuf,
    pub store_path: PathBuf,
}

pub fn silo_paths(silo_dir: &Path) -> (PathBuf, PathBuf) {
    (silo_dir.join(INDEX_FILE), silo_dir.join(STORE_FILE))
}

/// Embeds `input` into the silo directory, extending an existing index
/// and snippet store if present.
pub fn ingest_corpus(
    input: &Path,
    silo_dir: &Path,
    silo_id: &str,
    embedder: &dyn Embedder,
) -> Result<IngestReport, IngestError> {
    let parsed = read_snippets(input, silo_id)?;
    if parsed.snippets.is_empty() {
        return Err(IngestError::Empty(input.to_path_buf()));
    }
    fs::create_dir_all(silo_dir).map_err(|source| IngestError::Io {
        path: silo_dir.to_path_buf(),
        source,
    })?;
    let (index_path, store_path) = silo_paths(silo_dir);
    let (mut index, mut store) = if index_path.exists() {
        (load_index(&index_path)?, SnippetStore::load(&store_path)?)
    } else {
        (FlatIndex::new(embedder.spec()), SnippetStore::new())
    };
    if index.spec() != embedder.spec() {
        return Err(IndexError::DimMismatch {
            expected: index.dim(),
            actual: embedder.spec().dim,
        }
        .into());
    }
    let mut added = 0;
    let mut duplicates = parsed.duplicates;
    for snippet in parsed.snippets {
        if index.contains(&snippet.doc_id) {
            duplicates += 1;
            continue;
        }
        let v = embedder.embed(&snippet.text).map_err(IndexError::from)?;
        index.insert(snippet.doc_id, &v)?;
        store.insert(snippet);
        added += 1;
    }
    save_index(&index, &index_path)?;
    store.save(&store_path)?;
    Ok(IngestReport {
        silo_id: silo_id.to_string(),
        lines: parsed.lines,
        added,
        duplicates,
        malformed: parsed.malformed.len(),
        index_count: index.len(),
        index_path,
        store_path,
    })
}

/// Loads a silo directory written by [`ingest_corpus`].
pub fn load_silo(silo_dir: &Path) -> Result<(FlatIndex, SnippetStore), IngestError> {
    let (index_path, store_path) = silo_paths(silo_dir);
    Ok((load_index(&index_path)?, SnippetStore::load(&store_path)?))
}
