//! End-to-end federation scenarios over the simulated network.

use std::collections::{BTreeSet, HashSet};

use fedrag_core::attestation::SessionKey;
use fedrag_core::channel::{ChannelError, Opener, Sealer, EPOCH_SILO};
use fedrag_core::clock::Clock;
use fedrag_core::eval::{BenchmarkQuestion, BenchmarkRun};
use fedrag_core::inference::InferenceMode;
use fedrag_core::protocol::{
    sealed_aad, Envelope, FederationError, QueryId, RetrievalResponse, SealedBody, WireHit, AAD_RESPONSE,
};
use fedrag_core::sim::{build_sim, Direction, FaultKind, FaultSpec, ProviderSetup, SimConfig, SimFederation};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{expected_bench, questions, sim_config};

pub const SEED: u64 = 7;
pub const DENIED: &str = "wikipedia";

pub fn sim(cfg: &SimConfig) -> SimFederation {
    build_sim(cfg).expect("sim builds")
}

/// A response that claims to come from `from`, sealed under a key the
/// server never agreed to.
pub fn forged_response(fed: &SimFederation, from: &str, rng: &mut ChaCha20Rng) -> Vec<u8> {
    let snippet = fed
        .snippets()
        .iter()
        .find(|s| s.source == DENIED)
        .expect("denied silo has snippets");
    let query_id = QueryId::random(rng);
    let body = RetrievalResponse {
        query_id,
        client_id: from.to_string(),
        hits: vec![WireHit {
            doc_id: snippet.doc_id,
            text: snippet.text.clone(),
            source: snippet.source.clone(),
            l2_score: 0.0,
            rank: 0,
        }],
        elapsed_ms: 0,
    };
    let sealer = Sealer::new(SessionKey::from_bytes(rng.gen()), from, EPOCH_SILO);
    let sealed = sealer
        .seal(&sealed_aad(AAD_RESPONSE, &query_id), &serde_json::to_vec(&body).unwrap())
        .unwrap();
    Envelope::RetrievalResponse(SealedBody(sealed.encode())).to_bytes()
}

/// Four silos, one with an unapproved build, and forged responses injected
/// ahead of every query.
pub fn check_gating() -> Result<String, String> {
    let mut cfg = sim_config(SEED);
    let denied_index = cfg
        .corpora
        .iter()
        .position(|p| p.file_stem().unwrap() == DENIED)
        .unwrap();
    cfg.denied_clients = vec![denied_index];
    let fed = sim(&cfg);
    let report = fed.handshake_report();
    if report.established.len() != 3 || !report.rejected.iter().any(|(c, _)| c == DENIED) {
        return Err(format!("handshake report {report:?}"));
    }
    let denied_docs: HashSet<_> = fed
        .snippets()
        .iter()
        .filter(|s| s.source == DENIED)
        .map(|s| s.doc_id)
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let mut forged_seen = 0;
    for q in questions() {
        fed.network().inject_frame(DENIED, "server", forged_response(&fed, DENIED, &mut rng));
        fed.network().inject_frame("pubmed", "server", forged_response(&fed, "pubmed", &mut rng));
        let record = fed.handle_query(&q.question).map_err(|e| format!("{}: {e}", q.qid))?;
        let contributors: BTreeSet<&str> = record
            .fused_context
            .documents
            .iter()
            .flat_map(|d| d.contributing.iter().map(|c| c.client_id.as_str()))
            .collect();
        if record.responders.len() != 3 || record.responders.iter().any(|r| r == DENIED) {
            return Err(format!("{}: responders {:?}", q.qid, record.responders));
        }
        if contributors.contains(DENIED) || contributors.len() > 3 {
            return Err(format!("{}: contributors {contributors:?}", q.qid));
        }
        if record.fused_context.documents.iter().any(|d| denied_docs.contains(&d.doc_id)) {
            return Err(format!("{}: a denied document reached the context", q.qid));
        }
        forged_seen += record
            .discarded
            .iter()
            .filter(|d| {
                (d.from == DENIED && d.reason == "NoSession")
                    || (d.from == "pubmed" && d.reason == "AuthenticationFailure")
            })
            .count();
    }
    if forged_seen != 20 {
        return Err(format!("{forged_seen} of 20 forged frames were rejected"));
    }
    Ok("3 contributors on 10 queries, 20 forged frames rejected".into())
}

fn windows(bytes: &[u8], len: usize) -> impl Iterator<Item = &[u8]> {
    bytes.windows(len)
}

/// Every 20-byte window of every snippet (plain and hex-encoded) against
/// every recorded frame and every provider prompt. Windows that also occur
/// in the caller's own question or option text are not snippet content and
/// are skipped.
pub fn check_confidentiality() -> Result<String, String> {
    let fed = sim(&sim_config(SEED));
    let questions = questions();
    for mode in InferenceMode::ALL {
        fed.run_benchmark("fixture", &questions, mode).map_err(|e| e.to_string())?;
    }
    scan_for_leaks(&fed, &questions)
}

pub fn scan_for_leaks(fed: &SimFederation, questions: &[BenchmarkQuestion]) -> Result<String, String> {
    const MIN: usize = 20;
    let asked: Vec<&str> = questions
        .iter()
        .flat_map(|q| std::iter::once(q.question.text.as_str()).chain(q.question.options.iter().map(|o| o.text.as_str())))
        .collect();
    let public: HashSet<&[u8]> = asked.iter().flat_map(|t| windows(t.as_bytes(), MIN)).collect();
    let mut skipped = 0;
    let frames = fed.frame_log().snapshot();
    let prompts = fed.provider_prompts();
    if prompts.is_empty() {
        return Err("the provider was never called".into());
    }
    let mut seen: HashSet<&[u8]> = HashSet::new();
    let mut seen_hex: HashSet<&[u8]> = HashSet::new();
    let mut bytes_scanned = 0;
    for blob in frames.iter().map(|f| f.bytes.as_slice()).chain(prompts.iter().map(|p| p.as_bytes())) {
        bytes_scanned += blob.len();
        seen.extend(windows(blob, MIN));
        seen_hex.extend(windows(blob, 2 * MIN));
    }
    for s in fed.snippets() {
        let text = s.text.as_bytes();
        let hex = hex::encode(text);
        for (i, w) in windows(text, MIN).enumerate() {
            if public.contains(w) {
                skipped += 1;
                continue;
            }
            if seen.contains(w) || seen_hex.contains(&hex.as_bytes()[2 * i..2 * i + 2 * MIN]) {
                return Err(format!("snippet {} leaked: {:?}", s.doc_id.to_hex(), String::from_utf8_lossy(w)));
            }
        }
    }
    Ok(format!(
        "{} frames and {} provider prompts, {bytes_scanned} bytes, no snippet substring ({skipped} windows shared with questions skipped)",
        frames.len(),
        prompts.len()
    ))
}

/// Random single-bit flips over sealed payloads of random size.
pub fn check_bit_flips(n: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut failures = 0;
    for i in 0..n {
        let key = SessionKey::from_bytes(rng.gen());
        let sealer = Sealer::new(key.clone(), format!("client-{}", i % 7), EPOCH_SILO);
        let opener = Opener::new(key).expecting_epoch(EPOCH_SILO);
        let mut aad = vec![0u8; rng.gen_range(0..40)];
        rng.fill_bytes(&mut aad);
        let mut plaintext = vec![0u8; rng.gen_range(0..300)];
        rng.fill_bytes(&mut plaintext);
        let mut wire = sealer.seal(&aad, &plaintext).unwrap().encode();
        let bit = rng.gen_range(0..wire.len() * 8);
        wire[bit / 8] ^= 1 << (bit % 8);
        if opener.open_wire(&wire) == Err(ChannelError::AuthenticationFailure) {
            failures += 1;
        }
    }
    if failures == n {
        Ok(format!("{n} flips, {n} authentication failures"))
    } else {
        Err(format!("{failures} authentication failures out of {n} flips"))
    }
}

/// Cascading with the provider down and confidential via the mock endpoint
/// both reproduce standalone answers.
pub fn check_mode_equivalence() -> Result<String, String> {
    let mut cfg = sim_config(SEED);
    cfg.provider = ProviderSetup::Unavailable;
    let standalone = sim(&cfg);
    let cascading = sim(&cfg);
    let confidential = sim(&cfg);
    let mut degraded = 0;
    for q in questions() {
        let a = standalone
            .handle_query_as(&q.question, InferenceMode::Standalone)
            .map_err(|e| e.to_string())?;
        let b = cascading
            .handle_query_as(&q.question, InferenceMode::Cascading)
            .map_err(|e| e.to_string())?;
        let c = confidential
            .handle_query_as(&q.question, InferenceMode::Confidential)
            .map_err(|e| e.to_string())?;
        if a.answer_text.as_bytes() != b.answer_text.as_bytes() || a.fused_context != b.fused_context {
            return Err(format!("{}: cascading differs from standalone", q.qid));
        }
        if a.answer_text != c.answer_text || a.fused_context != c.fused_context {
            return Err(format!("{}: confidential differs from standalone", q.qid));
        }
        degraded += usize::from(b.degraded);
    }
    if degraded != 10 {
        return Err(format!("{degraded} of 10 cascaded answers marked degraded"));
    }
    Ok("10 of 10 identical in cascading (provider down) and confidential modes".into())
}

pub fn bench_run(seed: u64, mode: InferenceMode) -> BenchmarkRun {
    sim(&sim_config(seed))
        .run_benchmark("fixture", &questions(), mode)
        .expect("benchmark runs")
}

/// Accuracy 0.70 with the precomputed predictions and contexts in every
/// mode, and identical JSON across two runs.
pub fn check_benchmark() -> Result<String, String> {
    let expected = expected_bench();
    let want = expected["questions"].as_array().unwrap();
    for mode in InferenceMode::ALL {
        let run = bench_run(SEED, mode);
        if (run.correct, run.total) != (7, 10) {
            return Err(format!("{mode:?}: {} of {}", run.correct, run.total));
        }
        for (got, want) in run.per_question.iter().zip(want) {
            let ids: Vec<String> = got.fused_doc_ids.iter().map(|d| d.to_hex()).collect();
            let want_ids: Vec<&str> = want["fused_doc_ids"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_str().unwrap())
                .collect();
            if got.qid != want["qid"] || got.predicted.as_deref() != want["predicted"].as_str() || ids != want_ids {
                return Err(format!("{mode:?} {}: differs from the precomputed answer", got.qid));
            }
        }
        if run.to_json() != bench_run(SEED, mode).to_json() {
            return Err(format!("{mode:?}: two seeded runs differ"));
        }
    }
    Ok("0.70 in all three modes, repeat runs byte-identical".into())
}

/// One silo's responses arrive after the deadline; then the same loss with
/// every silo required.
pub fn check_deadline() -> Result<String, String> {
    const LATE: &str = "textbooks";
    let mut cfg = sim_config(SEED);
    let deadline = cfg.federation.response_deadline_ms;
    cfg.faults = vec![FaultSpec::new(LATE, Direction::FromClient, FaultKind::Delay { ms: deadline + 5_000 })
        .only("retrieval_response")];
    let fed = sim(&cfg);
    let q = &questions()[0].question;
    let started = fed.clock().now_ms();
    let record = fed.handle_query(q).map_err(|e| e.to_string())?;
    let waited = fed.clock().now_ms() - started;
    if record.responders.len() != 3 || record.responders.iter().any(|r| r == LATE) {
        return Err(format!("responders {:?}", record.responders));
    }
    if waited < deadline || waited > deadline + 10 {
        return Err(format!("query took {waited} ms against a {deadline} ms deadline"));
    }

    cfg.federation.min_responders = 4;
    cfg.faults = vec![FaultSpec::new(LATE, Direction::FromClient, FaultKind::Drop).only("retrieval_response")];
    let fed = sim(&cfg);
    match fed.handle_query(q) {
        Err(FederationError::InsufficientResponders { got: 3, need: 4 }) => Ok(format!(
            "late silo excluded after {waited} ms, InsufficientResponders with min_responders=4"
        )),
        other => Err(format!("min_responders=4 gave {:?}", other.map(|r| r.responders))),
    }
}
