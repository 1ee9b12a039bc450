//! Checks against the byte-exact fixtures produced by the reference script.

use fedrag_core::embedding::{stable_hash64, Embedder, EmbedderSpec, FeatureHashEmbedder};
use fedrag_core::index::{build_index, DocumentSnippet, FlatIndex};

use super::{fixtures, read_json};

fn hexf(s: &str) -> f64 {
    // Python's float.hex() writes zero as "0x0.0p+0", which hexf-parse rejects.
    let s = s.replace("p+", "p");
    if s.trim_start_matches('-') == "0x0.0p0" {
        return if s.starts_with('-') { -0.0 } else { 0.0 };
    }
    hexf_parse::parse_hexf64(&s, false).unwrap_or_else(|e| panic!("bad hex float {s}: {e:?}"))
}

/// FNV-1a digests and every embedding vector, compared bit for bit.
pub fn check_embeddings() -> Result<usize, String> {
    let g = read_json("golden_embeddings.json");
    for (text, hex) in g["fnv1a64"].as_object().unwrap() {
        let got = format!("{:016x}", stable_hash64(text.as_bytes()));
        if got != hex.as_str().unwrap() {
            return Err(format!("fnv1a64({text:?}) = {got}, want {hex}"));
        }
    }
    let vectors = g["vectors"].as_array().unwrap();
    for v in vectors {
        let text = v["text"].as_str().unwrap();
        let dim = v["dim"].as_u64().unwrap() as usize;
        let normalize = v["normalize"].as_bool().unwrap();
        let got = FeatureHashEmbedder::new(dim, normalize).unwrap().embed(text).unwrap();
        let want: Vec<f64> = v["values"].as_array().unwrap().iter().map(|x| hexf(x.as_str().unwrap())).collect();
        if got.values().len() != want.len() {
            return Err(format!("{text:?} dim {dim}: length {}", got.values().len()));
        }
        for (i, (a, b)) in got.values().iter().zip(&want).enumerate() {
            if a.to_bits() != b.to_bits() {
                return Err(format!("{text:?} dim {dim} normalize {normalize}: [{i}] {a:e} != {b:e}"));
            }
        }
    }
    Ok(vectors.len())
}

fn golden_index() -> (FlatIndex, serde_json::Value, FeatureHashEmbedder) {
    let g = read_json("golden_index_search.json");
    let dim = g["dim"].as_u64().unwrap() as usize;
    let embedder = FeatureHashEmbedder::new(dim, true).unwrap();
    let snippets: Vec<DocumentSnippet> = g["texts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| DocumentSnippet::new(t.as_str().unwrap(), "golden").unwrap())
        .collect();
    (build_index(&snippets, &embedder).unwrap(), g, embedder)
}

/// Index file bytes, their round trip, and a search over the loaded copy.
pub fn check_index_bytes() -> Result<usize, String> {
    let (index, g, embedder) = golden_index();
    let want = std::fs::read(fixtures().join("golden_index.frix")).unwrap();
    let got = index.to_bytes();
    if got != want {
        let at = got.iter().zip(&want).position(|(a, b)| a != b).unwrap_or(got.len().min(want.len()));
        return Err(format!("index bytes differ at offset {at} ({} vs {} bytes)", got.len(), want.len()));
    }
    let loaded = FlatIndex::from_bytes(&want, EmbedderSpec::feature_hash(index.dim())).map_err(|e| e.to_string())?;
    if loaded != index {
        return Err("loaded index differs from the built one".into());
    }
    let q = embedder.embed(g["query"].as_str().unwrap()).unwrap();
    let hits = loaded.search(&q, 3).map_err(|e| e.to_string())?;
    let want_hits = g["hits"].as_array().unwrap();
    if hits.len() != want_hits.len() {
        return Err(format!("{} hits, want {}", hits.len(), want_hits.len()));
    }
    for (h, w) in hits.iter().zip(want_hits) {
        let score = hexf(w["score"].as_str().unwrap());
        if h.row as u64 != w["row"].as_u64().unwrap()
            || h.doc_id.to_hex() != w["doc_id"].as_str().unwrap()
            || h.score.to_bits() != score.to_bits()
        {
            return Err(format!("hit {h:?} != {w}"));
        }
    }
    Ok(want.len())
}

/// ChaCha20-Poly1305 sample from RFC 8439 section 2.8.2.
pub fn check_aead_vector() -> Result<(), String> {
    use fedrag_core::attestation::SessionKey;
    use fedrag_core::channel::{aead_decrypt, aead_encrypt};

    let key = SessionKey::from_bytes(std::array::from_fn(|i| 0x80 + i as u8));
    let nonce: [u8; 12] = hex::decode("070000004041424344454647").unwrap().try_into().unwrap();
    let aad = hex::decode("50515253c0c1c2c3c4c5c6c7").unwrap();
    let pt = b"Ladies and Gentlemen of the class of '99: If I could offer you only one tip for the future, sunscreen would be it.";
    let (ct, tag) = aead_encrypt(&key, &nonce, &aad, pt);
    let want_ct = "d31a8d34648e60db7b86afbc53ef7ec2a4aded51296e08fea9e2b5a736ee62d63dbea45e8ca9671282fafb69da92728b1a71de0a9e060b2905d6a5b67ecd3b3692ddbd7f2d778b8c9803aee328091b58fab324e4fad675945585808b4831d7bc3ff4def08e4b7a9de576d26586cec64b6116";
    if hex::encode(&ct) != want_ct || hex::encode(tag) != "1ae10b594f09e26a7e902ecbd0600691" {
        return Err("ciphertext or tag differs from the published vector".into());
    }
    match aead_decrypt(&key, &nonce, &aad, &ct, &tag) {
        Ok(p) if p == pt => Ok(()),
        _ => Err("published vector does not decrypt".into()),
    }
}
