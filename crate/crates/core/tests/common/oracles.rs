//! Brute-force reference implementations and the randomized comparisons
//! against them.

use std::collections::BTreeMap;

use fedrag_core::embedding::{EmbedderSpec, EmbeddingVector};
use fedrag_core::fusion::{fuse, FusionConfig, RetrievedHit};
use fedrag_core::index::{DocId, FlatIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn random_id(rng: &mut ChaCha20Rng) -> DocId {
    DocId::from_bytes(rng.gen())
}

/// Scans every row: score, then row, ascending.
pub fn scan(rows: &[(DocId, Vec<f32>)], query: &[f64], k: usize) -> Vec<(usize, DocId, f64)> {
    let mut all: Vec<(usize, DocId, f64)> = rows
        .iter()
        .enumerate()
        .map(|(row, (id, v))| {
            let score = query
                .iter()
                .zip(v)
                .fold(0.0f64, |acc, (q, x)| acc + (q - *x as f64) * (q - *x as f64));
            (row, *id, score)
        })
        .collect();
    all.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Compares `FlatIndex::search` with [`scan`] on random corpora. Some rows
/// repeat an earlier vector so equal scores occur.
pub fn retrieval_trials(trials: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for t in 0..trials {
        let n = rng.gen_range(1..=500);
        let dim = rng.gen_range(1..=64);
        let mut index = FlatIndex::new(EmbedderSpec::feature_hash(dim));
        let mut rows: Vec<(DocId, Vec<f32>)> = Vec::with_capacity(n);
        for _ in 0..n {
            let values: Vec<f64> = if !rows.is_empty() && rng.gen_bool(0.1) {
                let src = rng.gen_range(0..rows.len());
                rows[src].1.iter().map(|x| *x as f64).collect()
            } else {
                (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let id = random_id(&mut rng);
            index
                .insert(id, &EmbeddingVector::new(values.clone()).unwrap())
                .map_err(|e| e.to_string())?;
            rows.push((id, values.iter().map(|x| *x as f32).collect()));
        }
        let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = rng.gen_range(1..=n + 5);
        let got = index
            .search(&EmbeddingVector::new(query.clone()).unwrap(), k)
            .map_err(|e| e.to_string())?;
        let want = scan(&rows, &query, k);
        let same = got.len() == want.len()
            && got
                .iter()
                .zip(&want)
                .all(|(g, w)| g.row == w.0 && g.doc_id == w.1 && g.score.to_bits() == w.2.to_bits());
        if !same {
            return Err(format!("trial {t}: n={n} dim={dim} k={k} differs from the scan"));
        }
    }
    Ok(())
}

/// Map-and-sort fusion: per-client terms summed in client-id order, then
/// score descending and doc id ascending.
pub fn rrf_oracle(lists: &BTreeMap<String, Vec<DocId>>, cfg: &FusionConfig) -> Vec<(DocId, f64)> {
    let mut scores: BTreeMap<DocId, f64> = BTreeMap::new();
    for docs in lists.values() {
        for (rank, id) in docs.iter().enumerate() {
            *scores.entry(*id).or_insert(0.0) += 1.0 / (cfg.k_rrf as f64 + rank as f64 + 1.0);
        }
    }
    let mut out: Vec<(DocId, f64)> = scores.into_iter().collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out.truncate(cfg.context_k);
    out
}

/// Random federations drawn from a small shared pool of ids so documents
/// overlap across clients.
pub fn rrf_trials(trials: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for t in 0..trials {
        let pool: Vec<DocId> = (0..rng.gen_range(1..=20)).map(|_| random_id(&mut rng)).collect();
        let cfg = if rng.gen_bool(0.5) {
            FusionConfig::default()
        } else {
            FusionConfig {
                k_rrf: rng.gen_range(1..=100),
                context_k: rng.gen_range(1..=30),
            }
        };
        let mut lists: BTreeMap<String, Vec<DocId>> = BTreeMap::new();
        for c in 0..rng.gen_range(1..=6) {
            let len = rng.gen_range(usize::from(c == 0)..=10.min(pool.len()));
            let mut picked = pool.clone();
            for i in 0..len {
                let j = rng.gen_range(i..picked.len());
                picked.swap(i, j);
            }
            picked.truncate(len);
            lists.insert(format!("client-{c}"), picked);
        }
        // Reversed input order must not change the result.
        let mut input: Vec<(String, Vec<RetrievedHit>)> = lists
            .iter()
            .map(|(c, docs)| {
                let hits = docs
                    .iter()
                    .enumerate()
                    .map(|(r, id)| RetrievedHit {
                        doc_id: *id,
                        text: id.to_hex(),
                        source: c.clone(),
                        l2_score: r as f64,
                    })
                    .collect();
                (c.clone(), hits)
            })
            .collect();
        input.reverse();
        let fused = fuse("q", input, &cfg).map_err(|e| format!("trial {t}: {e}"))?;
        let want = rrf_oracle(&lists, &cfg);
        let same = fused.documents.len() == want.len()
            && fused
                .documents
                .iter()
                .zip(&want)
                .all(|(d, w)| d.doc_id == w.0 && d.rrf_score.to_bits() == w.1.to_bits());
        if !same {
            return Err(format!("trial {t}: fused ranking differs from the oracle"));
        }
    }
    Ok(())
}
