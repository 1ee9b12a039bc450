mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::federation::{scan_for_leaks, sim, SEED};
use common::{questions, sim_config};
use fedrag_core::attestation::{Attester, IdentityKey, Measurement};
use fedrag_core::clock::VirtualClock;
use fedrag_core::embedding::{EmbedderSpec, FeatureHashEmbedder};
use fedrag_core::index::{build_index, DocumentSnippet, SnippetStore};
use fedrag_core::inference::Question;
use fedrag_core::protocol::{QueryBroadcast, QueryId, SiloErrorCode, SiloService};
use fedrag_core::sim::{component_manifest, Direction, FaultKind, FaultSpec, Trigger};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn reasons(records: &[fedrag_core::protocol::AnswerRecord]) -> BTreeMap<(String, String), usize> {
    let mut out = BTreeMap::new();
    for r in records {
        for d in &r.discarded {
            *out.entry((d.from.clone(), d.reason.clone())).or_insert(0) += 1;
        }
    }
    out
}

#[test]
fn tampered_responses_are_discarded() {
    let mut cfg = sim_config(SEED);
    cfg.faults = vec![FaultSpec::new("pubmed", Direction::FromClient, FaultKind::Tamper).only("retrieval_response")];
    let fed = sim(&cfg);
    let records: Vec<_> = questions()
        .iter()
        .take(4)
        .map(|q| fed.handle_query(&q.question).unwrap())
        .collect();
    for r in &records {
        assert_eq!(r.responders, ["statpearls", "textbooks", "wikipedia"]);
    }
    assert_eq!(reasons(&records)[&("pubmed".into(), "AuthenticationFailure".into())], 4);
}

#[test]
fn tampered_broadcast_gets_no_answer() {
    let mut cfg = sim_config(SEED);
    cfg.faults = vec![FaultSpec::new("statpearls", Direction::ToClient, FaultKind::Tamper)
        .only("query_broadcast")
        .when(Trigger::Nth { indices: vec![0] })];
    let fed = sim(&cfg);
    let q = &questions()[0].question;
    let first = fed.handle_query(q).unwrap();
    assert!(!first.responders.contains(&"statpearls".to_string()));
    assert_eq!(first.total_ms, cfg.federation.response_deadline_ms);
    // The session survives; the next broadcast is answered.
    let second = fed.handle_query(q).unwrap();
    assert_eq!(second.responders.len(), 4);
}

#[test]
fn duplicates_count_once_and_are_flagged_as_replays() {
    let clean = sim(&sim_config(SEED));
    let mut cfg = sim_config(SEED);
    cfg.faults = vec![FaultSpec::new("*", Direction::FromClient, FaultKind::Duplicate).only("retrieval_response")];
    let dup = sim(&cfg);
    let mut records = Vec::new();
    for q in questions().iter().take(3) {
        let a = clean.handle_query(&q.question).unwrap();
        let b = dup.handle_query(&q.question).unwrap();
        assert_eq!(a.fused_context, b.fused_context);
        assert_eq!(a.answer_text, b.answer_text);
        records.push(b);
    }
    let replays: usize = reasons(&records)
        .iter()
        .filter(|((_, r), _)| r == "ReplayDetected")
        .map(|(_, n)| n)
        .sum();
    assert!(replays >= 3, "{:?}", reasons(&records));
}

#[test]
fn dropped_broadcast_waits_for_the_deadline() {
    let mut cfg = sim_config(SEED);
    cfg.faults = vec![FaultSpec::new("textbooks", Direction::ToClient, FaultKind::Drop).only("query_broadcast")];
    let fed = sim(&cfg);
    let r = fed.handle_query(&questions()[1].question).unwrap();
    assert_eq!(r.responders, ["pubmed", "statpearls", "wikipedia"]);
    assert_eq!(r.total_ms, cfg.federation.response_deadline_ms);
    assert!(r.per_client_timing.iter().all(|t| t.client_id != "textbooks"));
}

#[test]
fn empty_query_leaves_no_responders() {
    let fed = sim(&sim_config(SEED));
    match fed.handle_query(&Question::free_form("   ")) {
        Ok(r) => panic!("answered an empty query: {:?}", r.responders),
        Err(e) => assert_eq!(e.code(), "InsufficientResponders"),
    }
}

#[test]
fn same_seed_same_frames_and_answers() {
    let run = || {
        let fed = sim(&sim_config(SEED));
        let answers: Vec<_> = questions()
            .iter()
            .take(3)
            .map(|q| serde_json::to_string(&fed.handle_query(&q.question).unwrap()).unwrap())
            .collect();
        (serde_json::to_string(&fed.frame_log().snapshot()).unwrap(), answers)
    };
    let (frames_a, answers_a) = run();
    let (frames_b, answers_b) = run();
    assert_eq!(answers_a, answers_b);
    assert_eq!(frames_a, frames_b);
    let (frames_c, _) = {
        let fed = sim(&sim_config(SEED + 1));
        fed.handle_query(&questions()[0].question).unwrap();
        (serde_json::to_string(&fed.frame_log().snapshot()).unwrap(), ())
    };
    assert_ne!(frames_a, frames_c);
}

#[test]
fn leak_scan_catches_plaintext() {
    let fed = sim(&sim_config(SEED));
    let snippet = fed.snippets()[3].text.clone();
    fed.network().inject_frame("pubmed", "server", snippet.into_bytes());
    assert!(scan_for_leaks(&fed, &questions()).is_err());
}

fn small_silo(texts: &[&str], dim: usize) -> SiloService {
    let embedder = Arc::new(FeatureHashEmbedder::new(dim, true).unwrap());
    let snippets: Vec<DocumentSnippet> = texts.iter().map(|t| DocumentSnippet::new(*t, "small").unwrap()).collect();
    let index = build_index(&snippets, embedder.as_ref()).unwrap();
    let mut store = SnippetStore::new();
    for s in snippets {
        store.insert(s);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let attester = Attester::new(
        IdentityKey::generate("small", &mut rng),
        Measurement::of_manifest(&component_manifest("fedrag-silo", false)),
    );
    SiloService::new(attester, index, store, embedder, Arc::new(VirtualClock::new()))
}

fn broadcast(text: &str, top_k: usize, spec: EmbedderSpec) -> QueryBroadcast {
    QueryBroadcast {
        query_id: QueryId::random(&mut ChaCha20Rng::seed_from_u64(2)),
        query_text: text.into(),
        top_k,
        deadline_ms: 1_000,
        embed_spec: spec,
    }
}

const FIVE: [&str; 5] = [
    "Warfarin requires INR monitoring.",
    "Insulin lowers blood glucose.",
    "Lipase is elevated in acute pancreatitis.",
    "Gout shows uric acid crystals.",
    "Ultrasonography is first line for gallstones.",
];

#[test]
fn small_silo_returns_everything_it_has() {
    let silo = small_silo(&FIVE, 64);
    let hits = silo.retrieve(&broadcast("acute pancreatitis", 8, EmbedderSpec::feature_hash(64))).unwrap();
    assert_eq!(hits.len(), 5);
    assert!(hits.iter().enumerate().all(|(i, h)| h.rank == i));
    assert!(hits.windows(2).all(|w| w[0].l2_score <= w[1].l2_score));
    assert_eq!(hits[0].text, FIVE[2]);
}

#[test]
fn retrieval_is_idempotent() {
    let silo = small_silo(&FIVE, 64);
    let b = broadcast("blood glucose insulin", 3, EmbedderSpec::feature_hash(64));
    assert_eq!(silo.retrieve(&b).unwrap(), silo.retrieve(&b).unwrap());
}

#[test]
fn mismatched_or_empty_queries_are_refused() {
    let silo = small_silo(&FIVE, 64);
    assert_eq!(
        silo.retrieve(&broadcast("gout", 3, EmbedderSpec::feature_hash(32))),
        Err(SiloErrorCode::DimMismatch)
    );
    let mut unnormalized = EmbedderSpec::feature_hash(64);
    unnormalized.normalize = false;
    assert_eq!(silo.retrieve(&broadcast("gout", 3, unnormalized)), Err(SiloErrorCode::SpecMismatch));
    assert_eq!(
        silo.retrieve(&broadcast(" \t", 3, EmbedderSpec::feature_hash(64))),
        Err(SiloErrorCode::EmptyQuery)
    );
}
