//! Exhaustive squared-L2 index over a silo's snippets.
//!
//! Scores are squared Euclidean distances (lower is closer). Entries are
//! stored as `f32`; distances accumulate in `f64`, dimension 0 upward, so
//! every score is bit-reproducible. Ties break by ascending row.
//!
//! On-disk layout (little-endian):
//!
//! ```text
//! "FRIX" | version u16 | dim u32 | count u64 | count × (doc_id [32] | f32 × dim)
//! ```
//!
//! The embedder spec lives next to the index in `<file>.spec.json`; snippet
//! text lives in a JSONL sidecar (see [`SnippetStore`]).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{EmbedError, Embedder, EmbedderSpec, EmbeddingVector};

pub const INDEX_MAGIC: &[u8; 4] = b"FRIX";
pub const INDEX_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("snippet text is empty")]
    EmptyText,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("index format error: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// SHA-256 of a snippet's UTF-8 text.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DocId([u8; 32]);

impl DocId {
    pub fn of_text(text: &str) -> Self {
        Self(Sha256::digest(text.as_bytes()).into())
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DocId({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for DocId {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Self(out))
    }
}

impl Serialize for DocId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for DocId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A corpus text unit. Its id is derived from the text, so the same text
/// has the same id in every silo.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSnippet {
    pub doc_id: DocId,
    pub text: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, String>>,
}

impl DocumentSnippet {
    pub fn new(text: impl Into<String>, source: impl Into<String>) -> Result<Self, IndexError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(IndexError::EmptyText);
        }
        Ok(Self {
            doc_id: DocId::of_text(&text),
            text,
            source: source.into(),
            meta: None,
        })
    }

    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = Some(meta);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub doc_id: DocId,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub doc_id: DocId,
    pub score: f64,
    pub row: usize,
}

/// Flat index; row `i` is `entries[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    spec: EmbedderSpec,
    entries: Vec<IndexEntry>,
    rows_by_id: HashMap<DocId, usize>,
}

/// Squared L2 distance accumulated in `f64`, dimension 0 upward.
pub fn squared_l2(query: &[f64], entry: &[f32]) -> f64 {
    let mut sum = 0.0f64;
    for (q, e) in query.iter().zip(entry) {
        let d = q - f64::from(*e);
        sum += d * d;
    }
    sum
}

impl FlatIndex {
    pub fn new(spec: EmbedderSpec) -> Self {
        Self {
            dim: spec.dim,
            spec,
            entries: Vec::new(),
            rows_by_id: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spec(&self) -> EmbedderSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn contains(&self, id: &DocId) -> bool {
        self.rows_by_id.contains_key(id)
    }

    /// Appends a vector; returns `Ok(false)` when the id is already present.
    pub fn insert(&mut self, doc_id: DocId, vector: &EmbeddingVector) -> Result<bool, IndexError> {
        if vector.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                actual: vector.dim(),
            });
        }
        if self.rows_by_id.contains_key(&doc_id) {
            return Ok(false);
        }
        let stored = vector.values().iter().map(|v| *v as f32).collect();
        self.push_raw(doc_id, stored);
        Ok(true)
    }

    fn push_raw(&mut self, doc_id: DocId, vector: Vec<f32>) {
        self.rows_by_id.insert(doc_id, self.entries.len());
        self.entries.push(IndexEntry { doc_id, vector });
    }

    /// Exact top-`k`, ascending by score, ties by row.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let q = query.values();
        let mut hits: Vec<ScoredHit> = self
            .entries
            .iter()
            .enumerate()
            .map(|(row, e)| ScoredHit {
                doc_id: e.doc_id,
                score: squared_l2(q, &e.vector),
                row,
            })
            .collect();
        let k = k.min(hits.len());
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, cmp_hits);
            hits.truncate(k);
        }
        hits.sort_by(cmp_hits);
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.entries.len() * (32 + 4 * self.dim));
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(e.doc_id.as_bytes());
            for v in &e.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], spec: EmbedderSpec) -> Result<Self, IndexError> {
        if bytes.len() < HEADER_LEN {
            return Err(IndexError::Format("truncated header".into()));
        }
        if &bytes[0..4] != INDEX_MAGIC {
            return Err(IndexError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != INDEX_VERSION {
            return Err(IndexError::Format(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
        if dim == 0 {
            return Err(IndexError::Format("zero dimension".into()));
        }
        if dim != spec.dim {
            return Err(IndexError::DimMismatch {
                expected: spec.dim,
                actual: dim,
            });
        }
        let entry_len = 32 + 4 * dim;
        let body = &bytes[HEADER_LEN..];
        let expected = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(entry_len))
            .ok_or_else(|| IndexError::Format("entry count overflows".into()))?;
        if body.len() != expected {
            return Err(IndexError::Format(format!(
                "payload is {} bytes, header implies {expected}",
                body.len()
            )));
        }
        let mut index = FlatIndex::new(spec);
        for chunk in body.chunks_exact(entry_len) {
            let doc_id = DocId::from_bytes(chunk[..32].try_into().unwrap());
            let vector: Vec<f32> = chunk[32..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(IndexError::Format("non-finite vector component".into()));
            }
            if index.contains(&doc_id) {
                return Err(IndexError::Format(format!("duplicate doc_id {doc_id}")));
            }
            index.push_raw(doc_id, vector);
        }
        Ok(index)
    }
}

fn cmp_hits(a: &ScoredHit, b: &ScoredHit) -> std::cmp::Ordering {
    a.score.total_cmp(&b.score).then(a.row.cmp(&b.row))
}

/// Embeds every snippet and builds an index; repeated texts collapse into
/// the first occurrence.
pub fn build_index(
    snippets: &[DocumentSnippet],
    embedder: &dyn Embedder,
) -> Result<FlatIndex, IndexError> {
    if snippets.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    let mut index = FlatIndex::new(embedder.spec());
    for s in snippets {
        if index.contains(&s.doc_id) {
            continue;
        }
        let v = embedder.embed(&s.text)?;
        index.insert(s.doc_id, &v)?;
    }
    Ok(index)
}

fn spec_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".spec.json");
    PathBuf::from(name)
}

pub fn save_index(index: &FlatIndex, path: &Path) -> Result<(), IndexError> {
    fs::write(path, index.to_bytes())?;
    let spec = serde_json::to_vec(&index.spec).map_err(|e| IndexError::Format(e.to_string()))?;
    fs::write(spec_path(path), spec)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<FlatIndex, IndexError> {
    let bytes = fs::read(path)?;
    let spec_bytes = fs::read(spec_path(path))?;
    let spec: EmbedderSpec =
        serde_json::from_slice(&spec_bytes).map_err(|e| IndexError::Format(e.to_string()))?;
    FlatIndex::from_bytes(&bytes, spec)
}

/// Snippet text keyed by id, persisted as JSONL in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SnippetStore {
    order: Vec<DocId>,
    by_id: HashMap<DocId, DocumentSnippet>,
}

impl SnippetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn insert(&mut self, snippet: DocumentSnippet) -> bool {
        if self.by_id.contains_key(&snippet.doc_id) {
            return false;
        }
        self.order.push(snippet.doc_id);
        self.by_id.insert(snippet.doc_id, snippet);
        true
    }

    pub fn get(&self, id: &DocId) -> Option<&DocumentSnippet> {
        self.by_id.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DocumentSnippet> {
        self.order.iter().map(move |id| &self.by_id[id])
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for s in self.iter() {
            serde_json::to_writer(&mut w, s).map_err(|e| IndexError::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut store = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: DocumentSnippet = serde_json::from_str(&line)
                .map_err(|e| IndexError::Format(format!("sidecar line {}: {e}", n + 1)))?;
            if s.doc_id != DocId::of_text(&s.text) {
                return Err(IndexError::Format(format!(
                    "sidecar line {}: doc_id does not match text",
                    n + 1
                )));
            }
            store.insert(s);
        }
        Ok(store)
    }
}
