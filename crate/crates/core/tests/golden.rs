mod common;

use fedrag_core::embedding::{Embedder, FeatureHashEmbedder};

#[test]
fn embeddings_match_reference_bits() {
    let n = common::golden::check_embeddings().unwrap();
    assert_eq!(n, 28);
}

#[test]
fn index_file_and_search_match_reference() {
    assert_eq!(common::golden::check_index_bytes().unwrap(), 498);
}

#[test]
fn published_aead_vector() {
    common::golden::check_aead_vector().unwrap();
}

#[test]
fn token_order_does_not_matter() {
    let e = FeatureHashEmbedder::new(16, true).unwrap();
    assert_eq!(e.embed("aa bb").unwrap(), e.embed("bb aa").unwrap());
}
