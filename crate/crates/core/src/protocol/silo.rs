//! Silo side of the protocol.
//!
//! [`SiloService`] holds what is shared across connections (index, texts,
//! identity); [`SiloConnection`] is the per-connection state machine. It
//! consumes one frame at a time and returns the frames to send back, so the
//! same code runs under the simulator and over TCP.

use std::sync::Arc;

use rand_chacha::ChaCha20Rng;

use super::{
    sealed_aad, Envelope, ErrorResponse, EvidenceMsg, QueryBroadcast, RetrievalResponse, SealedBody,
    SessionAcceptMsg, SiloErrorCode, WireHit, AAD_ERROR, AAD_QUERY, AAD_RESPONSE,
};
use crate::attestation::{verify_evidence, Attester, AuthorizationPolicy, EphemeralKey, Nonce};
use crate::channel::{Opener, Sealer, EPOCH_SERVER, EPOCH_SILO};
use crate::clock::Clock;
use crate::embedding::{EmbedError, Embedder};
use crate::index::{FlatIndex, IndexError, SnippetStore};

pub struct SiloService {
    client_id: String,
    index: FlatIndex,
    store: SnippetStore,
    embedder: Arc<dyn Embedder>,
    attester: Attester,
    server_policy: Option<AuthorizationPolicy>,
    clock: Arc<dyn Clock>,
}

impl SiloService {
    /// The client id is the attester's identity key id.
    pub fn new(
        attester: Attester,
        index: FlatIndex,
        store: SnippetStore,
        embedder: Arc<dyn Embedder>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            client_id: attester.identity().key_id().to_string(),
            index,
            store,
            embedder,
            attester,
            server_policy: None,
            clock,
        }
    }

    /// Require the server to attest against `policy` before any query is
    /// answered.
    pub fn with_server_policy(mut self, policy: AuthorizationPolicy) -> Self {
        self.server_policy = Some(policy);
        self
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn index(&self) -> &FlatIndex {
        &self.index
    }

    pub fn store(&self) -> &SnippetStore {
        &self.store
    }

    /// Local top-k retrieval for a broadcast.
    pub fn retrieve(&self, b: &QueryBroadcast) -> Result<Vec<WireHit>, SiloErrorCode> {
        if b.embed_spec.dim != self.index.dim() {
            return Err(SiloErrorCode::DimMismatch);
        }
        if b.embed_spec != self.embedder.spec() {
            return Err(SiloErrorCode::SpecMismatch);
        }
        let query = self.embedder.embed(&b.query_text).map_err(|e| match e {
            EmbedError::EmptyText => SiloErrorCode::EmptyQuery,
            EmbedError::DimMismatch { .. } => SiloErrorCode::DimMismatch,
            _ => SiloErrorCode::Internal,
        })?;
        let hits = self.index.search(&query, b.top_k).map_err(|e| match e {
            IndexError::ZeroK => SiloErrorCode::Internal,
            IndexError::DimMismatch { .. } => SiloErrorCode::DimMismatch,
            _ => SiloErrorCode::Internal,
        })?;
        hits.into_iter()
            .enumerate()
            .map(|(rank, h)| {
                let snippet = self.store.get(&h.doc_id).ok_or(SiloErrorCode::Internal)?;
                Ok(WireHit {
                    doc_id: h.doc_id,
                    text: snippet.text.clone(),
                    source: snippet.source.clone(),
                    l2_score: h.score,
                    rank,
                })
            })
            .collect()
    }

    pub fn connection(self: &Arc<Self>, rng: ChaCha20Rng) -> SiloConnection {
        SiloConnection {
            service: Arc::clone(self),
            rng,
            state: State::Idle,
        }
    }
}

struct Channel {
    sealer: Sealer,
    opener: Opener,
    expires_at_ms: u64,
}

enum State {
    Idle,
    AwaitingAccept {
        eph: EphemeralKey,
        server_nonce: Nonce,
        silo_nonce: Nonce,
    },
    Established(Channel),
}

pub struct SiloConnection {
    service: Arc<SiloService>,
    rng: ChaCha20Rng,
    state: State,
}

impl SiloConnection {
    pub fn client_id(&self) -> &str {
        &self.service.client_id
    }

    pub fn is_established(&self) -> bool {
        match &self.state {
            State::Established(ch) => self.service.clock.now_ms() < ch.expires_at_ms,
            _ => false,
        }
    }

    /// Processes one inbound frame; returns frames to send to the server.
    /// Anything unexpected, unauthenticated or out of state is dropped.
    pub fn handle(&mut self, frame: &[u8]) -> Vec<Vec<u8>> {
        let env = match Envelope::from_bytes(frame) {
            Ok(env) => env,
            Err(e) => {
                tracing::debug!(client = %self.service.client_id, error = %e, "dropping malformed frame");
                return Vec::new();
            }
        };
        match env {
            Envelope::Challenge(c) => {
                let (evidence, eph) = self.service.attester.produce_evidence(c.nonce, &mut self.rng);
                let silo_nonce = Nonce::random(&mut self.rng);
                self.state = State::AwaitingAccept {
                    eph,
                    server_nonce: c.nonce,
                    silo_nonce,
                };
                vec![Envelope::Evidence(EvidenceMsg {
                    evidence,
                    silo_nonce,
                    embed_spec: self.service.embedder.spec(),
                })
                .to_bytes()]
            }
            Envelope::SessionAccept(accept) => {
                self.on_accept(accept);
                Vec::new()
            }
            Envelope::SessionReject(r) => {
                tracing::warn!(client = %self.service.client_id, code = %r.code, "server rejected attestation");
                self.state = State::Idle;
                Vec::new()
            }
            Envelope::QueryBroadcast(body) => self.on_query(&body).into_iter().collect(),
            other => {
                tracing::debug!(client = %self.service.client_id, kind = other.kind(), "unexpected frame");
                Vec::new()
            }
        }
    }

    fn on_accept(&mut self, accept: SessionAcceptMsg) {
        let State::AwaitingAccept {
            eph,
            server_nonce,
            silo_nonce,
        } = std::mem::replace(&mut self.state, State::Idle)
        else {
            return;
        };
        if let Some(policy) = &self.service.server_policy {
            let verified = verify_evidence(&accept.server_evidence, policy, &silo_nonce);
            if let Err(e) = verified {
                tracing::warn!(client = %self.service.client_id, error = %e, "server attestation failed");
                return;
            }
            if accept.server_evidence.client_pub != accept.server_pub {
                tracing::warn!(client = %self.service.client_id, "server evidence does not bind its key");
                return;
            }
        }
        let key = eph.derive_session_key(&accept.server_pub, &server_nonce);
        let now = self.service.clock.now_ms();
        let ttl = self
            .service
            .server_policy
            .as_ref()
            .map_or(u64::MAX, |p| p.session_ttl_ms);
        self.state = State::Established(Channel {
            sealer: Sealer::new(key.clone(), self.service.client_id.clone(), EPOCH_SILO),
            opener: Opener::new(key).expecting_epoch(EPOCH_SERVER),
            expires_at_ms: accept.expires_at_ms.min(now.saturating_add(ttl)),
        });
    }

    fn on_query(&mut self, body: &SealedBody) -> Option<Vec<u8>> {
        let now = self.service.clock.now_ms();
        let State::Established(ch) = &self.state else {
            tracing::debug!(client = %self.service.client_id, "query without session");
            return None;
        };
        if now >= ch.expires_at_ms {
            tracing::warn!(client = %self.service.client_id, "session expired; ignoring query");
            return None;
        }
        let (sealed, plaintext) = match ch.opener.open_wire(&body.0) {
            Ok(v) => v,
            Err(e) => {
                tracing::warn!(client = %self.service.client_id, error = %e, "rejecting sealed query");
                return None;
            }
        };
        let broadcast: QueryBroadcast = serde_json::from_slice(&plaintext).ok()?;
        if sealed.aad != sealed_aad(AAD_QUERY, &broadcast.query_id) {
            tracing::warn!(client = %self.service.client_id, "query aad mismatch");
            return None;
        }
        let client_id = self.service.client_id.clone();
        let (label, plaintext, envelope): (_, Vec<u8>, fn(SealedBody) -> Envelope) =
            match self.service.retrieve(&broadcast) {
                Ok(hits) => {
                    let resp = RetrievalResponse {
                        query_id: broadcast.query_id,
                        client_id,
                        hits,
                        elapsed_ms: self.service.clock.now_ms().saturating_sub(now),
                    };
                    let bytes = serde_json::to_vec(&resp).expect("response serializes");
                    (AAD_RESPONSE, bytes, Envelope::RetrievalResponse)
                }
                Err(code) => {
                    tracing::warn!(client = %self.service.client_id, ?code, "local retrieval failed");
                    let resp = ErrorResponse {
                        query_id: broadcast.query_id,
                        client_id,
                        code,
                    };
                    let bytes = serde_json::to_vec(&resp).expect("error serializes");
                    (AAD_ERROR, bytes, Envelope::ErrorResponse)
                }
            };
        match ch.sealer.seal(&sealed_aad(label, &broadcast.query_id), &plaintext) {
            Ok(sealed) => Some(envelope(SealedBody(sealed.encode())).to_bytes()),
            Err(e) => {
                tracing::error!(client = %self.service.client_id, error = %e, "cannot seal response");
                None
            }
        }
    }
}
