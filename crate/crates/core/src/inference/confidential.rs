//! Sealed inference against an attested remote endpoint.
//!
//! Key setup is one round trip: the server sends a fresh nonce and its
//! ephemeral X25519 key; the endpoint answers with attestation evidence over
//! that nonce carrying its own ephemeral key. Both sides derive the session
//! key as in silo handshakes. After that, each request is a canonical JSON
//! payload sealed under the key with associated data
//! `confidential-infer ‖ query_id`; the endpoint answers with a sealed
//! [`InferenceResponse`] under `confidential-result ‖ query_id`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::prompt::{render_prompt, PromptTemplate};
use super::{Generator, InferenceError, InferenceRequest, InferenceResponse, Question};
use crate::attestation::{
    verify_evidence, AttestationEvidence, Attester, AuthorizationPolicy, EphemeralKey, Nonce,
    PublicKeyBytes,
};
use crate::channel::{Opener, Sealer, EPOCH_ENDPOINT, EPOCH_SERVER};
use crate::clock::Clock;
use crate::fusion::FusedContext;
use crate::index::DocId;
use crate::wire_log::FrameLog;

pub const CONFIDENTIAL_AAD: &[u8] = b"confidential-infer";
pub const CONFIDENTIAL_RESULT_AAD: &[u8] = b"confidential-result";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointAttestRequest {
    pub nonce: Nonce,
    pub server_pub: PublicKeyBytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDoc {
    pub doc_id: DocId,
    pub text: String,
    pub source: String,
}

/// Plaintext of a sealed inference request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidentialPayload {
    pub query_id: String,
    pub template_id: String,
    pub docs: Vec<ContextDoc>,
    pub question: Question,
}

fn aad(prefix: &[u8], query_id: &str) -> Vec<u8> {
    let mut out = prefix.to_vec();
    out.extend_from_slice(query_id.as_bytes());
    out
}

fn key_id_for(nonce: &Nonce) -> String {
    format!("crc-{}", hex::encode(&nonce.0[..8]))
}

/// How the server reaches the endpoint (HTTP in production, in-process in
/// tests).
pub trait ConfidentialTransport: Send + Sync {
    fn attest(&self, req: &EndpointAttestRequest) -> Result<AttestationEvidence, InferenceError>;
    /// Sends an encoded sealed payload and returns the encoded sealed reply.
    fn sealed_infer(&self, body: &[u8]) -> Result<Vec<u8>, InferenceError>;
}

struct EndpointSession {
    sealer: Sealer,
    opener: Opener,
    expires_at_ms: u64,
}

/// Server side of the confidential hop.
pub struct ConfidentialClient {
    transport: Arc<dyn ConfidentialTransport>,
    policy: AuthorizationPolicy,
    clock: Arc<dyn Clock>,
    session: Mutex<Option<EndpointSession>>,
}

impl ConfidentialClient {
    pub fn new(
        transport: Arc<dyn ConfidentialTransport>,
        policy: AuthorizationPolicy,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            transport,
            policy,
            clock,
            session: Mutex::new(None),
        }
    }

    pub fn is_attested(&self) -> bool {
        let now = self.clock.now_ms();
        self.session
            .lock()
            .expect("endpoint session lock")
            .as_ref()
            .is_some_and(|s| now < s.expires_at_ms)
    }

    /// Verifies the endpoint's measurement and establishes the key.
    pub fn handshake(&self, rng: &mut dyn RngCore) -> Result<(), InferenceError> {
        let nonce = Nonce::random(rng);
        let eph = EphemeralKey::generate(rng);
        let evidence = self.transport.attest(&EndpointAttestRequest {
            nonce,
            server_pub: eph.public(),
        })?;
        verify_evidence(&evidence, &self.policy, &nonce)?;
        let key = eph.derive_session_key(&evidence.client_pub, &nonce);
        let key_id = key_id_for(&nonce);
        *self.session.lock().expect("endpoint session lock") = Some(EndpointSession {
            sealer: Sealer::new(key.clone(), key_id, EPOCH_SERVER),
            opener: Opener::new(key).expecting_epoch(EPOCH_ENDPOINT),
            expires_at_ms: self.clock.now_ms().saturating_add(self.policy.session_ttl_ms),
        });
        tracing::debug!(measurement = %evidence.measurement, "confidential endpoint attested");
        Ok(())
    }

    pub fn infer(
        &self,
        fused: &FusedContext,
        question: &Question,
        template: &PromptTemplate,
    ) -> Result<InferenceResponse, InferenceError> {
        if fused.documents.is_empty() {
            return Err(InferenceError::EmptyContext);
        }
        let start = self.clock.now_ms();
        let payload = ConfidentialPayload {
            query_id: fused.query_id.clone(),
            template_id: template.id.clone(),
            docs: fused
                .documents
                .iter()
                .map(|d| ContextDoc {
                    doc_id: d.doc_id,
                    text: d.text.clone(),
                    source: d.source.clone(),
                })
                .collect(),
            question: question.clone(),
        };
        let plaintext =
            serde_json::to_vec(&payload).map_err(|e| InferenceError::BadResponse(e.to_string()))?;
        let request = {
            let guard = self.session.lock().expect("endpoint session lock");
            let session = guard
                .as_ref()
                .filter(|s| start < s.expires_at_ms)
                .ok_or(InferenceError::HandshakeRequired)?;
            session
                .sealer
                .seal(&aad(CONFIDENTIAL_AAD, &fused.query_id), &plaintext)
                .map_err(|e| InferenceError::BadResponse(e.to_string()))?
        };
        let reply = self.transport.sealed_infer(&request.encode())?;
        let guard = self.session.lock().expect("endpoint session lock");
        let session = guard.as_ref().ok_or(InferenceError::HandshakeRequired)?;
        let (sealed, body) = session
            .opener
            .open_wire(&reply)
            .map_err(|_| InferenceError::AuthenticationFailure)?;
        if sealed.aad != aad(CONFIDENTIAL_RESULT_AAD, &fused.query_id) {
            return Err(InferenceError::AuthenticationFailure);
        }
        let mut response: InferenceResponse =
            serde_json::from_slice(&body).map_err(|e| InferenceError::BadResponse(e.to_string()))?;
        response.latency_ms = self.clock.now_ms().saturating_sub(start).max(response.latency_ms);
        Ok(response)
    }
}

/// Endpoint logic holding the only copy of its session keys. Used as the
/// local stand-in for a remote confidential-compute service.
pub struct MockConfidentialEndpoint {
    attester: Attester,
    generator: Arc<dyn Generator>,
    templates: HashMap<String, PromptTemplate>,
    rng: Mutex<ChaCha20Rng>,
    sessions: Mutex<HashMap<String, (Sealer, Opener)>>,
}

impl MockConfidentialEndpoint {
    pub fn new(attester: Attester, generator: Arc<dyn Generator>, template: PromptTemplate, seed: u64) -> Self {
        let mut templates = HashMap::new();
        templates.insert(template.id.clone(), template);
        Self {
            attester,
            generator,
            templates,
            rng: Mutex::new(ChaCha20Rng::seed_from_u64(seed)),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn handle_attest(&self, req: &EndpointAttestRequest) -> AttestationEvidence {
        let mut rng = self.rng.lock().expect("endpoint rng lock");
        let (evidence, eph) = self.attester.produce_evidence(req.nonce, &mut *rng);
        let key = eph.derive_session_key(&req.server_pub, &req.nonce);
        let key_id = key_id_for(&req.nonce);
        self.sessions.lock().expect("endpoint sessions lock").insert(
            key_id.clone(),
            (
                Sealer::new(key.clone(), key_id, EPOCH_ENDPOINT),
                Opener::new(key).expecting_epoch(EPOCH_SERVER),
            ),
        );
        evidence
    }

    pub fn handle_sealed(&self, body: &[u8]) -> Result<Vec<u8>, InferenceError> {
        let sessions = self.sessions.lock().expect("endpoint sessions lock");
        let payload = crate::channel::EncryptedPayload::decode(body)
            .map_err(|_| InferenceError::AuthenticationFailure)?;
        let (sealer, opener) = sessions
            .get(&payload.key_id)
            .ok_or(InferenceError::AuthenticationFailure)?;
        let plaintext = opener
            .open(&payload)
            .map_err(|_| InferenceError::AuthenticationFailure)?;
        let request: ConfidentialPayload = serde_json::from_slice(&plaintext)
            .map_err(|e| InferenceError::BadResponse(e.to_string()))?;
        if payload.aad != aad(CONFIDENTIAL_AAD, &request.query_id) {
            return Err(InferenceError::AuthenticationFailure);
        }
        let template = self
            .templates
            .get(&request.template_id)
            .ok_or_else(|| InferenceError::BadResponse(format!("unknown template {}", request.template_id)))?;
        let docs: Vec<&str> = request.docs.iter().map(|d| d.text.as_str()).collect();
        let prompt = render_prompt(template, &docs, &request.question, None)?;
        let response = self.generator.generate(&InferenceRequest::new(prompt))?;
        let body = serde_json::to_vec(&response).map_err(|e| InferenceError::BadResponse(e.to_string()))?;
        let sealed = sealer
            .seal(&aad(CONFIDENTIAL_RESULT_AAD, &request.query_id), &body)
            .map_err(|e| InferenceError::BadResponse(e.to_string()))?;
        Ok(sealed.encode())
    }
}

/// Calls a [`MockConfidentialEndpoint`] directly, optionally recording the
/// bytes exchanged in a [`FrameLog`].
pub struct InProcessConfidentialTransport {
    endpoint: Arc<MockConfidentialEndpoint>,
    log: Option<(FrameLog, Arc<dyn Clock>)>,
}

impl InProcessConfidentialTransport {
    pub const SERVER_PEER: &'static str = "server";
    pub const ENDPOINT_PEER: &'static str = "confidential-endpoint";

    pub fn new(endpoint: Arc<MockConfidentialEndpoint>) -> Self {
        Self { endpoint, log: None }
    }

    pub fn with_log(mut self, log: FrameLog, clock: Arc<dyn Clock>) -> Self {
        self.log = Some((log, clock));
        self
    }

    fn record(&self, from: &str, to: &str, bytes: &[u8]) {
        if let Some((log, clock)) = &self.log {
            log.record_send(clock.now_ms(), from, to, bytes);
        }
    }
}

impl ConfidentialTransport for InProcessConfidentialTransport {
    fn attest(&self, req: &EndpointAttestRequest) -> Result<AttestationEvidence, InferenceError> {
        let body = serde_json::to_vec(req).map_err(|e| InferenceError::BadResponse(e.to_string()))?;
        self.record(Self::SERVER_PEER, Self::ENDPOINT_PEER, &body);
        let evidence = self.endpoint.handle_attest(req);
        let reply = serde_json::to_vec(&evidence).map_err(|e| InferenceError::BadResponse(e.to_string()))?;
        self.record(Self::ENDPOINT_PEER, Self::SERVER_PEER, &reply);
        Ok(evidence)
    }

    fn sealed_infer(&self, body: &[u8]) -> Result<Vec<u8>, InferenceError> {
        self.record(Self::SERVER_PEER, Self::ENDPOINT_PEER, body);
        let reply = self.endpoint.handle_sealed(body)?;
        self.record(Self::ENDPOINT_PEER, Self::SERVER_PEER, &reply);
        Ok(reply)
    }
}
