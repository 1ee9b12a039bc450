//! Reciprocal Rank Fusion across silos.
//!
//! Each silo contributes `1 / (k_rrf + rank + 1)` for every document it
//! returned, with `rank` the 0-based position in that silo's list. A
//! document returned by several silos accumulates one term per silo. Raw L2
//! distances are carried for provenance only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::DocId;

pub const DEFAULT_K_RRF: u32 = 60;
pub const DEFAULT_CONTEXT_K: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FusionError {
    #[error("no client lists to fuse")]
    EmptyFederation,
    #[error("invalid fusion config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub k_rrf: u32,
    pub context_k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            k_rrf: DEFAULT_K_RRF,
            context_k: DEFAULT_CONTEXT_K,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.k_rrf == 0 {
            return Err(FusionError::InvalidConfig("k_rrf must be >= 1"));
        }
        if self.context_k == 0 {
            return Err(FusionError::InvalidConfig("context_k must be >= 1"));
        }
        Ok(())
    }
}

/// One retrieved document as a silo reported it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedHit {
    pub doc_id: DocId,
    pub text: String,
    pub source: String,
    pub l2_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub client_id: String,
    pub rank: usize,
    pub l2_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDocument {
    pub doc_id: DocId,
    pub text: String,
    pub source: String,
    pub rrf_score: f64,
    /// Sorted by client id.
    pub contributing: Vec<Contribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedContext {
    pub query_id: String,
    pub documents: Vec<RankedDocument>,
    /// The `context_k` limit applied.
    pub truncated_to: usize,
    /// Unique documents before truncation.
    pub candidates: usize,
}

impl FusedContext {
    pub fn doc_ids(&self) -> Vec<DocId> {
        self.documents.iter().map(|d| d.doc_id).collect()
    }
}

pub fn rrf_term(rank: usize, k_rrf: u32) -> f64 {
    1.0 / (f64::from(k_rrf) + rank as f64 + 1.0)
}

/// Merges per-client ranked lists (each ascending by L2 score) into one
/// context ranking.
///
/// Scores are summed in ascending client-id order so the result does not
/// depend on input order. A document repeated inside one client's list only
/// counts at its first position. Output is sorted by score descending, then
/// doc id ascending, and truncated to `cfg.context_k`.
pub fn fuse<I, S>(
    query_id: &str,
    lists: I,
    cfg: &FusionConfig,
) -> Result<FusedContext, FusionError>
where
    I: IntoIterator<Item = (S, Vec<RetrievedHit>)>,
    S: Into<String>,
{
    cfg.validate()?;
    let lists: BTreeMap<String, Vec<RetrievedHit>> =
        lists.into_iter().map(|(c, l)| (c.into(), l)).collect();
    if lists.is_empty() {
        return Err(FusionError::EmptyFederation);
    }

    let mut merged: BTreeMap<DocId, RankedDocument> = BTreeMap::new();
    for (client_id, hits) in &lists {
        for (rank, hit) in hits.iter().enumerate() {
            let doc = merged.entry(hit.doc_id).or_insert_with(|| RankedDocument {
                doc_id: hit.doc_id,
                text: hit.text.clone(),
                source: hit.source.clone(),
                rrf_score: 0.0,
                contributing: Vec::new(),
            });
            if doc.contributing.last().is_some_and(|c| &c.client_id == client_id) {
                continue;
            }
            doc.rrf_score += rrf_term(rank, cfg.k_rrf);
            doc.contributing.push(Contribution {
                client_id: client_id.clone(),
                rank,
                l2_score: hit.l2_score,
            });
        }
    }

    let candidates = merged.len();
    let mut documents: Vec<RankedDocument> = merged.into_values().collect();
    documents.sort_by(|a, b| {
        b.rrf_score
            .total_cmp(&a.rrf_score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    documents.truncate(cfg.context_k);
    Ok(FusedContext {
        query_id: query_id.to_string(),
        documents,
        truncated_to: cfg.context_k,
        candidates,
    })
}
