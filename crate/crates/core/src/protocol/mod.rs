//! Federation wire protocol: handshake, sealed query broadcast and
//! retrieval responses, and the server's query lifecycle.
//!
//! Frames are a 4-byte big-endian length followed by a JSON envelope
//! `{"type": ..., "payload": ...}`. Handshake payloads are plaintext (but
//! signed); document-bearing payloads are the hex of an
//! [`EncryptedPayload`](crate::channel::EncryptedPayload) encoding.

use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::attestation::{AttestationEvidence, Nonce, PublicKeyBytes};
use crate::embedding::EmbedderSpec;
use crate::index::DocId;

pub mod server;
pub mod silo;
pub mod tcp;

pub use server::{AnswerRecord, ClientTiming, FederationConfig, FederationError, HandshakeReport, Server};
pub use silo::{SiloConnection, SiloService};

/// Upper bound on a single frame body.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

pub const AAD_QUERY: &[u8] = b"query-broadcast";
pub const AAD_RESPONSE: &[u8] = b"retrieval-response";
pub const AAD_ERROR: &[u8] = b"error-response";

pub const SERVER_PEER: &str = "server";

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueryId(pub [u8; 16]);

impl QueryId {
    pub fn random(rng: &mut dyn RngCore) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Self(b)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "QueryId({})", self.to_hex())
    }
}

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for QueryId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|e| e.to_string())?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| "query id must be 16 bytes".to_string())?;
        Ok(Self(arr))
    }
}

impl Serialize for QueryId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for QueryId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Associated data for a sealed message: `label ‖ query_id`.
pub fn sealed_aad(label: &[u8], query_id: &QueryId) -> Vec<u8> {
    let mut aad = Vec::with_capacity(label.len() + 16);
    aad.extend_from_slice(label);
    aad.extend_from_slice(&query_id.0);
    aad
}

/// Opaque sealed bytes, hex on the wire.
#[derive(Clone, PartialEq, Eq)]
pub struct SealedBody(pub Vec<u8>);

impl fmt::Debug for SealedBody {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SealedBody({} bytes)", self.0.len())
    }
}

impl Serialize for SealedBody {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for SealedBody {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map(SealedBody).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeMsg {
    pub nonce: Nonce,
    pub server_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceMsg {
    pub evidence: AttestationEvidence,
    /// Challenge for the server's own evidence.
    pub silo_nonce: Nonce,
    pub embed_spec: EmbedderSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionAcceptMsg {
    pub server_pub: PublicKeyBytes,
    /// Server evidence over `silo_nonce`, binding `server_pub`.
    pub server_evidence: AttestationEvidence,
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRejectMsg {
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Envelope {
    Challenge(ChallengeMsg),
    Evidence(EvidenceMsg),
    SessionAccept(SessionAcceptMsg),
    SessionReject(SessionRejectMsg),
    QueryBroadcast(SealedBody),
    RetrievalResponse(SealedBody),
    ErrorResponse(SealedBody),
}

impl Envelope {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Challenge(_) => "challenge",
            Self::Evidence(_) => "evidence",
            Self::SessionAccept(_) => "session_accept",
            Self::SessionReject(_) => "session_reject",
            Self::QueryBroadcast(_) => "query_broadcast",
            Self::RetrievalResponse(_) => "retrieval_response",
            Self::ErrorResponse(_) => "error_response",
        }
    }

    pub fn sealed_body(&self) -> Option<&SealedBody> {
        match self {
            Self::QueryBroadcast(b) | Self::RetrievalResponse(b) | Self::ErrorResponse(b) => Some(b),
            _ => None,
        }
    }

    pub fn sealed_body_mut(&mut self) -> Option<&mut SealedBody> {
        match self {
            Self::QueryBroadcast(b) | Self::RetrievalResponse(b) | Self::ErrorResponse(b) => Some(b),
            _ => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelope serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        serde_json::from_slice(bytes).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }
}

/// Plaintext of a sealed `query_broadcast`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBroadcast {
    pub query_id: QueryId,
    pub query_text: String,
    pub top_k: usize,
    /// Response budget in milliseconds, relative to receipt.
    pub deadline_ms: u64,
    pub embed_spec: EmbedderSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireHit {
    pub doc_id: DocId,
    pub text: String,
    pub source: String,
    pub l2_score: f64,
    pub rank: usize,
}

/// Plaintext of a sealed `retrieval_response`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResponse {
    pub query_id: QueryId,
    pub client_id: String,
    pub hits: Vec<WireHit>,
    pub elapsed_ms: u64,
}

impl RetrievalResponse {
    /// Ranks match positions, scores ascend, at most `top_k` hits.
    pub fn is_well_formed(&self, top_k: usize) -> bool {
        self.hits.len() <= top_k
            && self.hits.iter().enumerate().all(|(i, h)| h.rank == i && h.l2_score.is_finite())
            && self.hits.windows(2).all(|w| w[0].l2_score <= w[1].l2_score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiloErrorCode {
    DimMismatch,
    SpecMismatch,
    EmptyQuery,
    Internal,
}

/// Plaintext of a sealed `error_response`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub query_id: QueryId,
    pub client_id: String,
    pub code: SiloErrorCode,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(usize),
    #[error("transport: {0}")]
    Transport(String),
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    if body.len() > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

/// A frame received from a named peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inbound {
    pub from: String,
    pub bytes: Vec<u8>,
}

/// Server-side message passing to named peers.
///
/// `recv_until` returns `None` once `deadline_ms` (on the link's clock) is
/// reached without a frame. Per-peer ordering is preserved.
pub trait Link: Send {
    fn send(&mut self, to: &str, bytes: &[u8]) -> Result<(), ProtocolError>;
    fn recv_until(&mut self, deadline_ms: u64) -> Option<Inbound>;
    fn now_ms(&self) -> u64;
}
