//! Server side: attests silos, fans a query out to live sessions, collects
//! sealed responses until all answered or the deadline passed, fuses and
//! generates.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::sync::Mutex;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    sealed_aad, ChallengeMsg, Envelope, ErrorResponse, Inbound, Link, QueryBroadcast, QueryId,
    RetrievalResponse, SealedBody, SessionAcceptMsg, SessionRejectMsg, AAD_ERROR, AAD_QUERY,
    AAD_RESPONSE,
};
use crate::attestation::{Attester, AuthorizationPolicy, Gatekeeper};
use crate::channel::{ChannelError, Opener, Sealer, EPOCH_SERVER, EPOCH_SILO};
use crate::embedding::EmbedderSpec;
use crate::fusion::{fuse, FusedContext, FusionConfig, FusionError, RetrievedHit, DEFAULT_CONTEXT_K, DEFAULT_K_RRF};
use crate::inference::{InferenceEngine, InferenceError, InferenceMode, Question};

pub const DEFAULT_TOP_K: usize = 8;
pub const DEFAULT_RESPONSE_DEADLINE_MS: u64 = 10_000;
pub const DEFAULT_HANDSHAKE_TIMEOUT_MS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    /// Client ids, which are also their identity key ids.
    pub clients: Vec<String>,
    pub top_k: usize,
    pub k_rrf: u32,
    pub context_k: usize,
    pub response_deadline_ms: u64,
    pub handshake_timeout_ms: u64,
    pub min_responders: usize,
    pub inference_mode: InferenceMode,
    pub embed_spec: EmbedderSpec,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: Vec::new(),
            top_k: DEFAULT_TOP_K,
            k_rrf: DEFAULT_K_RRF,
            context_k: DEFAULT_CONTEXT_K,
            response_deadline_ms: DEFAULT_RESPONSE_DEADLINE_MS,
            handshake_timeout_ms: DEFAULT_HANDSHAKE_TIMEOUT_MS,
            min_responders: 1,
            inference_mode: InferenceMode::Standalone,
            embed_spec: EmbedderSpec::default(),
        }
    }
}

impl FederationConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            k_rrf: self.k_rrf,
            context_k: self.context_k,
        }
    }

    pub fn validate(&self) -> Result<(), FederationError> {
        let bad = |m: &str| Err(FederationError::Config(m.to_string()));
        if self.clients.is_empty() {
            return bad("at least one client is required");
        }
        let unique: BTreeSet<&String> = self.clients.iter().collect();
        if unique.len() != self.clients.len() {
            return bad("client ids must be unique");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.min_responders == 0 || self.min_responders > self.clients.len() {
            return bad("min_responders must be between 1 and the number of clients");
        }
        if self.embed_spec.validate().is_err() {
            return bad("embed_spec.dim must be at least 1");
        }
        self.fusion()
            .validate()
            .map_err(|e| FederationError::Config(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("only {got} of the required {need} clients responded")]
    InsufficientResponders { got: usize, need: usize },
    #[error("fusion: {0}")]
    Fusion(#[from] FusionError),
    #[error("inference for query {query_id}: {source}")]
    Inference {
        query_id: String,
        #[source]
        source: InferenceError,
    },
}

impl FederationError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Config(_) => "Config",
            Self::InsufficientResponders { .. } => "InsufficientResponders",
            Self::Fusion(_) => "Fusion",
            Self::Inference { source, .. } => source.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientTiming {
    pub client_id: String,
    /// Server-observed time from broadcast to accepted response.
    pub observed_ms: u64,
    /// Silo-reported local processing time.
    pub reported_elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardedFrame {
    pub from: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub query_id: QueryId,
    pub mode: InferenceMode,
    pub answer_text: String,
    pub backend_id: String,
    pub degraded: bool,
    pub fused_context: FusedContext,
    pub per_client_timing: Vec<ClientTiming>,
    pub responders: Vec<String>,
    /// Clients that answered with an error response.
    pub errored: Vec<String>,
    pub discarded: Vec<DiscardedFrame>,
    pub total_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandshakeReport {
    pub established: Vec<String>,
    /// `(client_id, error code)`.
    pub rejected: Vec<(String, String)>,
    pub unresponsive: Vec<String>,
}

struct PeerChannel {
    sealer: Sealer,
    opener: Opener,
}

enum Verdict {
    Hits(RetrievalResponse),
    Failed(ErrorResponse),
    Discard(String),
}

#[derive(Serialize)]
struct QueryLogLine<'a> {
    query_id: String,
    responders: usize,
    fused_count: usize,
    mode: InferenceMode,
    total_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

pub struct Server {
    server_id: String,
    cfg: FederationConfig,
    gatekeeper: Gatekeeper,
    attester: Attester,
    engine: InferenceEngine,
    link: Mutex<Box<dyn Link>>,
    rng: Mutex<ChaCha20Rng>,
    channels: Mutex<HashMap<String, PeerChannel>>,
    query_log: Mutex<Option<Box<dyn Write + Send>>>,
}

impl Server {
    pub fn new(
        cfg: FederationConfig,
        attester: Attester,
        policy: AuthorizationPolicy,
        engine: InferenceEngine,
        link: Box<dyn Link>,
        rng: ChaCha20Rng,
    ) -> Result<Self, FederationError> {
        cfg.validate()?;
        if policy.allowed_measurements.is_empty() {
            return Err(FederationError::Config("policy allows no measurements".into()));
        }
        Ok(Self {
            server_id: attester.identity().key_id().to_string(),
            cfg,
            gatekeeper: Gatekeeper::new(policy),
            attester,
            engine,
            link: Mutex::new(link),
            rng: Mutex::new(rng),
            channels: Mutex::new(HashMap::new()),
            query_log: Mutex::new(None),
        })
    }

    /// Appends one JSON line per query to `sink`.
    pub fn with_query_log(self, sink: Box<dyn Write + Send>) -> Self {
        self.set_query_log(sink);
        self
    }

    pub fn set_query_log(&self, sink: Box<dyn Write + Send>) {
        *self.query_log.lock().expect("query log lock") = Some(sink);
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn gatekeeper(&self) -> &Gatekeeper {
        &self.gatekeeper
    }

    pub fn engine(&self) -> &InferenceEngine {
        &self.engine
    }

    pub fn now_ms(&self) -> u64 {
        self.link.lock().expect("link lock").now_ms()
    }

    /// Challenges every configured client and admits those whose evidence
    /// verifies. Clients silent until the handshake timeout are reported as
    /// unresponsive.
    pub fn handshake_all(&self) -> HandshakeReport {
        let mut link = self.link.lock().expect("link lock");
        let mut rng = self.rng.lock().expect("rng lock");
        let mut report = HandshakeReport::default();
        let start = link.now_ms();
        let mut pending = BTreeSet::new();
        for client in &self.cfg.clients {
            match self.gatekeeper.issue_challenge(client, start, &mut *rng) {
                Ok(nonce) => {
                    let frame = Envelope::Challenge(ChallengeMsg {
                        nonce,
                        server_id: self.server_id.clone(),
                    })
                    .to_bytes();
                    match link.send(client, &frame) {
                        Ok(()) => {
                            pending.insert(client.clone());
                        }
                        Err(e) => {
                            tracing::warn!(client = %client, error = %e, "cannot reach client");
                            report.unresponsive.push(client.clone());
                        }
                    }
                }
                Err(e) => report.rejected.push((client.clone(), e.code().to_string())),
            }
        }

        let deadline = start.saturating_add(self.cfg.handshake_timeout_ms);
        while !pending.is_empty() {
            let Some(Inbound { from, bytes }) = link.recv_until(deadline) else {
                break;
            };
            if !pending.contains(&from) {
                continue;
            }
            let Ok(Envelope::Evidence(msg)) = Envelope::from_bytes(&bytes) else {
                continue;
            };
            pending.remove(&from);
            let reject = |link: &mut Box<dyn Link>, code: &str| {
                let frame = Envelope::SessionReject(SessionRejectMsg { code: code.to_string() }).to_bytes();
                let _ = link.send(&from, &frame);
            };
            if msg.embed_spec != self.cfg.embed_spec {
                tracing::warn!(client = %from, "embedding spec differs from federation");
                reject(&mut link, "SpecMismatch");
                report.rejected.push((from, "SpecMismatch".into()));
                continue;
            }
            match self.gatekeeper.admit(&from, &msg.evidence, link.now_ms(), &mut *rng) {
                Ok((session, server_pub)) => {
                    let key = session.session_key.clone();
                    self.channels.lock().expect("channel lock").insert(
                        from.clone(),
                        PeerChannel {
                            sealer: Sealer::new(key.clone(), self.server_id.clone(), EPOCH_SERVER),
                            opener: Opener::new(key).expecting_epoch(EPOCH_SILO),
                        },
                    );
                    let frame = Envelope::SessionAccept(SessionAcceptMsg {
                        server_pub,
                        server_evidence: self.attester.evidence_for(msg.silo_nonce, server_pub),
                        expires_at_ms: session.expires_at_ms,
                    })
                    .to_bytes();
                    let _ = link.send(&from, &frame);
                    report.established.push(from);
                }
                Err(e) => {
                    reject(&mut link, e.code());
                    report.rejected.push((from, e.code().to_string()));
                }
            }
        }
        report.unresponsive.extend(pending);
        report.established.sort();
        report.rejected.sort();
        report.unresponsive.sort();
        report
    }

    /// Runs one query with the configured inference mode.
    pub fn handle_query(&self, question: &Question) -> Result<AnswerRecord, FederationError> {
        self.handle_query_as(question, self.cfg.inference_mode)
    }

    /// Runs one query; the question text is the retrieval query.
    pub fn handle_query_as(
        &self,
        question: &Question,
        mode: InferenceMode,
    ) -> Result<AnswerRecord, FederationError> {
        let mut link = self.link.lock().expect("link lock");
        let start = link.now_ms();
        let query_id = QueryId::random(&mut *self.rng.lock().expect("rng lock"));
        let channels = self.channels.lock().expect("channel lock");

        let broadcast = QueryBroadcast {
            query_id,
            query_text: question.text.clone(),
            top_k: self.cfg.top_k,
            deadline_ms: self.cfg.response_deadline_ms,
            embed_spec: self.cfg.embed_spec,
        };
        let plaintext = serde_json::to_vec(&broadcast).expect("broadcast serializes");
        let mut awaiting = BTreeSet::new();
        for session in self.gatekeeper.live_sessions(start) {
            let Some(ch) = channels.get(&session.client_id) else {
                continue;
            };
            let sealed = match ch.sealer.seal(&sealed_aad(AAD_QUERY, &query_id), &plaintext) {
                Ok(s) => s,
                Err(e) => {
                    tracing::error!(client = %session.client_id, error = %e, "cannot seal broadcast");
                    continue;
                }
            };
            let frame = Envelope::QueryBroadcast(SealedBody(sealed.encode())).to_bytes();
            match link.send(&session.client_id, &frame) {
                Ok(()) => {
                    awaiting.insert(session.client_id);
                }
                Err(e) => tracing::warn!(client = %session.client_id, error = %e, "broadcast failed"),
            }
        }

        let deadline = start.saturating_add(self.cfg.response_deadline_ms);
        let mut lists: BTreeMap<String, Vec<RetrievedHit>> = BTreeMap::new();
        let mut timings = Vec::new();
        let mut errored = Vec::new();
        let mut discarded = Vec::new();
        while !awaiting.is_empty() {
            let Some(inbound) = link.recv_until(deadline) else {
                break;
            };
            let now = link.now_ms();
            match self.judge(&channels, &inbound, &query_id, now) {
                Verdict::Hits(resp) if awaiting.remove(&inbound.from) => {
                    timings.push(ClientTiming {
                        client_id: inbound.from.clone(),
                        observed_ms: now.saturating_sub(start),
                        reported_elapsed_ms: resp.elapsed_ms,
                    });
                    let hits = resp
                        .hits
                        .into_iter()
                        .map(|h| RetrievedHit {
                            doc_id: h.doc_id,
                            text: h.text,
                            source: h.source,
                            l2_score: h.l2_score,
                        })
                        .collect();
                    lists.insert(inbound.from, hits);
                }
                Verdict::Failed(err) if awaiting.remove(&inbound.from) => {
                    tracing::warn!(client = %inbound.from, code = ?err.code, "client reported an error");
                    errored.push(inbound.from);
                }
                Verdict::Hits(_) | Verdict::Failed(_) => {
                    discarded.push(DiscardedFrame {
                        from: inbound.from,
                        reason: "Unsolicited".into(),
                    });
                }
                Verdict::Discard(reason) => {
                    tracing::warn!(client = %inbound.from, %reason, "discarding frame");
                    discarded.push(DiscardedFrame {
                        from: inbound.from,
                        reason,
                    });
                }
            }
        }
        drop(channels);
        if !awaiting.is_empty() {
            tracing::warn!(query = %query_id, missing = ?awaiting, "deadline passed without responses");
        }

        let responders: Vec<String> = lists.keys().cloned().collect();
        if responders.len() < self.cfg.min_responders {
            let err = FederationError::InsufficientResponders {
                got: responders.len(),
                need: self.cfg.min_responders,
            };
            self.log_query(&query_id, responders.len(), 0, mode, link.now_ms() - start, Some(err.code()));
            return Err(err);
        }
        let fused = fuse(&query_id.to_hex(), lists, &self.cfg.fusion())?;
        let outcome = self.engine.infer(mode, &fused, question);
        let total_ms = link.now_ms().saturating_sub(start);
        let outcome = match outcome {
            Ok(o) => o,
            Err(source) => {
                self.log_query(&query_id, responders.len(), fused.documents.len(), mode, total_ms, Some(source.code()));
                return Err(FederationError::Inference {
                    query_id: query_id.to_hex(),
                    source,
                });
            }
        };
        self.log_query(&query_id, responders.len(), fused.documents.len(), mode, total_ms, None);
        timings.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        errored.sort();
        Ok(AnswerRecord {
            query_id,
            mode,
            answer_text: outcome.response.text,
            backend_id: outcome.response.backend_id,
            degraded: outcome.degraded,
            fused_context: fused,
            per_client_timing: timings,
            responders,
            errored,
            discarded,
            total_ms,
        })
    }

    fn judge(
        &self,
        channels: &HashMap<String, PeerChannel>,
        inbound: &Inbound,
        query_id: &QueryId,
        now: u64,
    ) -> Verdict {
        let discard = |r: &str| Verdict::Discard(r.to_string());
        let Some(ch) = channels.get(&inbound.from) else {
            return discard("NoSession");
        };
        if self.gatekeeper.live_session(&inbound.from, now).is_none() {
            return discard("NoSession");
        }
        let (label, body) = match Envelope::from_bytes(&inbound.bytes) {
            Ok(Envelope::RetrievalResponse(b)) => (AAD_RESPONSE, b),
            Ok(Envelope::ErrorResponse(b)) => (AAD_ERROR, b),
            Ok(_) => return discard("UnexpectedType"),
            Err(_) => return discard("Malformed"),
        };
        let (sealed, plaintext) = match ch.opener.open_wire(&body.0) {
            Ok(v) => v,
            Err(ChannelError::ReplayDetected) => return discard("ReplayDetected"),
            Err(_) => return discard("AuthenticationFailure"),
        };
        if sealed.aad != sealed_aad(label, query_id) {
            return discard("StaleOrForeignQuery");
        }
        if label == AAD_ERROR {
            return match serde_json::from_slice::<ErrorResponse>(&plaintext) {
                Ok(e) if e.query_id == *query_id && e.client_id == inbound.from => Verdict::Failed(e),
                _ => discard("Malformed"),
            };
        }
        match serde_json::from_slice::<RetrievalResponse>(&plaintext) {
            Ok(r) if r.query_id != *query_id => discard("StaleOrForeignQuery"),
            Ok(r) if r.client_id != inbound.from => discard("ClientMismatch"),
            Ok(r) if !r.is_well_formed(self.cfg.top_k) => discard("Malformed"),
            Ok(r) => Verdict::Hits(r),
            Err(_) => discard("Malformed"),
        }
    }

    fn log_query(
        &self,
        query_id: &QueryId,
        responders: usize,
        fused_count: usize,
        mode: InferenceMode,
        total_ms: u64,
        error: Option<&str>,
    ) {
        let line = QueryLogLine {
            query_id: query_id.to_hex(),
            responders,
            fused_count,
            mode,
            total_ms,
            error,
        };
        let json = serde_json::to_string(&line).expect("log line serializes");
        tracing::info!(target: "fedrag::query", "{json}");
        if let Some(sink) = self.query_log.lock().expect("query log lock").as_mut() {
            if let Err(e) = writeln!(sink, "{json}").and_then(|_| sink.flush()) {
                tracing::warn!(error = %e, "cannot write query log");
            }
        }
    }
}
