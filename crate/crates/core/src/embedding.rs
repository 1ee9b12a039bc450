//! Text-to-vector embedding.
//!
//! The default embedder is signed feature hashing over a bag of words. Tokens
//! are hashed with FNV-1a (64-bit), so a given text maps to the same vector on
//! every platform and in every language that implements the same three steps:
//! tokenize, hash, accumulate.
//!
//! An HTTP embedder can be plugged in behind the same [`Embedder`] trait for
//! real models; it is never used by the test suite.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// FNV-1a offset basis (64-bit).
pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// FNV-1a prime (64-bit).
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Dimension used by fixtures and by [`EmbedderSpec::default`].
pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EmbedError {
    #[error("text is empty")]
    EmptyText,
    #[error("embedding dimension must be at least 1")]
    ZeroDim,
    #[error("vector dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("external embedder failed: {0}")]
    External(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    FeatureHash,
    External,
}

/// Identifies an embedding space. Two silos can only be federated when their
/// specs agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub normalize: bool,
}

impl EmbedderSpec {
    pub fn feature_hash(dim: usize) -> Self {
        Self {
            kind: EmbedderKind::FeatureHash,
            dim,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        Ok(())
    }
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self::feature_hash(DEFAULT_DIM)
    }
}

/// A fixed-length, finite embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::ZeroDim);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Something that turns text into vectors of one fixed spec.
pub trait Embedder: Send + Sync {
    fn spec(&self) -> EmbedderSpec;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

/// FNV-1a 64-bit over raw bytes.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Bucket index and sign contributed by one token.
pub fn token_bucket(token: &str, dim: usize) -> (usize, f64) {
    let hash = stable_hash64(token.as_bytes());
    let bucket = (hash % dim as u64) as usize;
    let sign = if hash >> 63 == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

/// Signed feature hashing, optionally L2-normalized.
///
/// An all-zero raw vector (every token cancelled out) stays all-zero even
/// when normalization is requested.
pub fn default_feature_hash_embed(
    text: &str,
    dim: usize,
    normalize: bool,
) -> Result<EmbeddingVector, EmbedError> {
    if dim == 0 {
        return Err(EmbedError::ZeroDim);
    }
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut values = vec![0.0f64; dim];
    for token in tokenize(text) {
        let (bucket, sign) = token_bucket(&token, dim);
        values[bucket] += sign;
    }
    if normalize {
        l2_normalize(&mut values);
    }
    EmbeddingVector::new(values)
}

/// In-place L2 normalization; leaves all-zero input untouched.
pub fn l2_normalize(values: &mut [f64]) {
    let mut sq = 0.0f64;
    for v in values.iter() {
        sq += v * v;
    }
    if sq > 0.0 {
        let norm = sq.sqrt();
        for v in values.iter_mut() {
            *v /= norm;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureHashEmbedder {
    spec: EmbedderSpec,
}

impl FeatureHashEmbedder {
    pub fn new(dim: usize, normalize: bool) -> Result<Self, EmbedError> {
        let spec = EmbedderSpec {
            kind: EmbedderKind::FeatureHash,
            dim,
            normalize,
        };
        spec.validate()?;
        Ok(Self { spec })
    }
}

impl Embedder for FeatureHashEmbedder {
    fn spec(&self) -> EmbedderSpec {
        self.spec
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        default_feature_hash_embed(text, self.spec.dim, self.spec.normalize)
    }
}

#[derive(Serialize)]
struct ExternalRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct ExternalResponse {
    vectors: Vec<Vec<f64>>,
}

/// Embedding service reached over HTTP:
/// `POST {"texts":[...]}` answering `{"vectors":[[...]]}`.
pub struct HttpEmbedder {
    url: String,
    spec: EmbedderSpec,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, normalize: bool, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            spec: EmbedderSpec {
                kind: EmbedderKind::External,
                dim,
                normalize,
            },
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let response: ExternalResponse = self
            .agent
            .post(&self.url)
            .send_json(ExternalRequest { texts })
            .map_err(|e| EmbedError::External(e.to_string()))?
            .into_json()
            .map_err(|e| EmbedError::External(e.to_string()))?;
        if response.vectors.len() != texts.len() {
            return Err(EmbedError::External(format!(
                "expected {} vectors, got {}",
                texts.len(),
                response.vectors.len()
            )));
        }
        response
            .vectors
            .into_iter()
            .map(|mut values| {
                if values.len() != self.spec.dim {
                    return Err(EmbedError::DimMismatch {
                        expected: self.spec.dim,
                        actual: values.len(),
                    });
                }
                if self.spec.normalize {
                    l2_normalize(&mut values);
                }
                EmbeddingVector::new(values)
            })
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn spec(&self) -> EmbedderSpec {
        self.spec
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_batch(&[text])?;
        Ok(out.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_rejected() {
        let e = FeatureHashEmbedder::new(8, true).unwrap();
        assert_eq!(e.embed(""), Err(EmbedError::EmptyText));
        assert_eq!(e.embed("  \t\n"), Err(EmbedError::EmptyText));
    }

    #[test]
    fn fnv_of_single_byte() {
        assert_eq!(stable_hash64(b"a"), 0xAF63_DC4C_8601_EC8C);
        assert_eq!(stable_hash64(b""), FNV_OFFSET);
        let (bucket, sign) = token_bucket("a", 8);
        assert_eq!(bucket, (0xAF63_DC4C_8601_EC8Cu64 % 8) as usize);
        assert_eq!(sign, -1.0);
    }

    #[test]
    fn single_token_is_signed_unit_vector() {
        let v = default_feature_hash_embed("a", 8, true).unwrap();
        let (bucket, sign) = token_bucket("a", 8);
        for (i, x) in v.values().iter().enumerate() {
            if i == bucket {
                assert_eq!(*x, sign);
            } else {
                assert_eq!(*x, 0.0);
            }
        }
    }

    #[test]
    fn word_order_does_not_matter() {
        let a = default_feature_hash_embed("aa bb", 8, true).unwrap();
        let b = default_feature_hash_embed("bb aa", 8, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("Hello, World!! x-ray 42"), vec!["hello", "world", "x", "ray", "42"]);
        assert_eq!(tokenize("Café NAÏVE"), vec!["café", "naïve"]);
        assert!(tokenize("--- ...").is_empty());
    }

    #[test]
    fn zero_dim_is_rejected() {
        assert!(FeatureHashEmbedder::new(0, true).is_err());
        assert_eq!(default_feature_hash_embed("a", 0, true), Err(EmbedError::ZeroDim));
    }

    #[test]
    fn spec_serializes_to_flat_json() {
        let json = serde_json::to_string(&EmbedderSpec::feature_hash(64)).unwrap();
        assert_eq!(json, r#"{"kind":"feature_hash","dim":64,"normalize":true}"#);
    }

    proptest! {
        #[test]
        fn normalized_output_has_unit_norm(text in "[a-z ]{1,60}", dim in 1usize..64) {
            prop_assume!(!text.trim().is_empty());
            let v = default_feature_hash_embed(&text, dim, true).unwrap();
            prop_assert_eq!(v.dim(), dim);
            let norm = v.l2_norm();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-9);
        }

        #[test]
        fn token_multiset_determines_vector(words in proptest::collection::vec("[a-z]{1,6}", 1..12), seed in any::<u64>()) {
            let mut shuffled = words.clone();
            let n = shuffled.len();
            for i in 0..n {
                let j = ((seed.rotate_left(i as u32) ^ i as u64) % n as u64) as usize;
                shuffled.swap(i, j);
            }
            let a = default_feature_hash_embed(&words.join(" "), 32, true).unwrap();
            let b = default_feature_hash_embed(&shuffled.join(" "), 32, true).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
