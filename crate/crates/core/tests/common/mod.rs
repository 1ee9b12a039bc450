#![allow(dead_code)]

use std::path::PathBuf;

use fedrag_core::eval::{load_questions, BenchmarkQuestion};
use fedrag_core::sim::SimConfig;

pub mod golden;
pub mod federation;
pub mod oracles;

/// Resolves from either workspace crate.
pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

pub fn read_json(name: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(fixtures().join(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn corpora() -> Vec<PathBuf> {
    ["pubmed", "statpearls", "textbooks", "wikipedia"]
        .iter()
        .map(|n| fixtures().join("corpora").join(format!("{n}.jsonl")))
        .collect()
}

pub fn sim_config(seed: u64) -> SimConfig {
    let mut cfg = SimConfig::with_corpora(corpora());
    cfg.seed = seed;
    cfg
}

pub fn questions() -> Vec<BenchmarkQuestion> {
    load_questions(&fixtures().join("questions10.jsonl")).expect("fixture questions")
}

pub fn expected_bench() -> serde_json::Value {
    read_json("expected_bench10.json")
}
