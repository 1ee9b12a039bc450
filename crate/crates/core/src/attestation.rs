//! Simulated remote attestation.
//!
//! A node proves its identity and the code it runs by signing
//! `measurement ‖ nonce ‖ ephemeral_pub` with its Ed25519 identity key. The
//! verifier checks the signature against a registered key, the measurement
//! against an allowlist and the nonce against the challenge it issued, then
//! both sides run X25519 on their ephemeral keys and derive the session key
//! with HKDF-SHA256 (salt = nonce, info = `fedrag/v1/session`).
//!
//! The same evidence format is used in every direction: silo to server,
//! server to silo, and confidential endpoint to server.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

pub const SESSION_KDF_INFO: &[u8] = b"fedrag/v1/session";
const EVIDENCE_DOMAIN: &[u8] = b"fedrag/v1/evidence";

pub const DEFAULT_NONCE_TTL_MS: u64 = 30_000;
pub const DEFAULT_SESSION_TTL_MS: u64 = 3_600_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestationError {
    #[error("client {0} is not registered")]
    UnknownClient(String),
    #[error("identity key {0} is not registered")]
    UnknownIdentity(String),
    #[error("evidence signature does not verify")]
    BadSignature,
    #[error("measurement {0} is not allowed")]
    MeasurementDenied(String),
    #[error("nonce is missing, expired, mismatched or already used")]
    ReplayDetected,
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error("policy error: {0}")]
    Policy(String),
}

impl AttestationError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownClient(_) => "UnknownClient",
            Self::UnknownIdentity(_) => "UnknownIdentity",
            Self::BadSignature => "BadSignature",
            Self::MeasurementDenied(_) => "MeasurementDenied",
            Self::ReplayDetected => "ReplayDetected",
            Self::InvalidKey(_) => "InvalidKey",
            Self::Policy(_) => "Policy",
        }
    }
}

macro_rules! hex_newtype {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl FromStr for $name {
            type Err = hex::FromHexError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let mut out = [0u8; $len];
                hex::decode_to_slice(s, &mut out)?;
                Ok(Self(out))
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_newtype!(Measurement, 32);
hex_newtype!(Nonce, 16);
hex_newtype!(PublicKeyBytes, 32);
hex_newtype!(SignatureBytes, 64);

impl Measurement {
    /// SHA-256 of the manifest's canonical JSON (sorted keys, no whitespace).
    pub fn of_manifest(manifest: &serde_json::Value) -> Self {
        Self(Sha256::digest(canonical_json(manifest).as_bytes()).into())
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(value: &serde_json::Value) -> String {
    fn sort(v: &serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(map) => {
                let sorted: BTreeMap<&String, serde_json::Value> =
                    map.iter().map(|(k, v)| (k, sort(v))).collect();
                serde_json::Value::Object(
                    sorted.into_iter().map(|(k, v)| (k.clone(), v)).collect(),
                )
            }
            serde_json::Value::Array(items) => {
                serde_json::Value::Array(items.iter().map(sort).collect())
            }
            other => other.clone(),
        }
    }
    sort(value).to_string()
}

impl Nonce {
    pub fn random(rng: &mut dyn RngCore) -> Self {
        let mut n = [0u8; 16];
        rng.fill_bytes(&mut n);
        Self(n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationEvidence {
    pub measurement: Measurement,
    pub nonce: Nonce,
    /// Ephemeral X25519 public key of the attesting side.
    pub client_pub: PublicKeyBytes,
    pub signature: SignatureBytes,
    pub identity_key_id: String,
}

fn evidence_digest(m: &Measurement, nonce: &Nonce, public: &PublicKeyBytes) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(EVIDENCE_DOMAIN);
    h.update(m.0);
    h.update(nonce.0);
    h.update(public.0);
    h.finalize().into()
}

/// 32-byte symmetric session key. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey([u8; 32]);

impl SessionKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKey(<redacted>)")
    }
}

/// Per-handshake X25519 secret.
pub struct EphemeralKey {
    secret: StaticSecret,
}

impl EphemeralKey {
    pub fn generate(rng: &mut dyn RngCore) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self {
            secret: StaticSecret::from(bytes),
        }
    }

    pub fn public(&self) -> PublicKeyBytes {
        PublicKeyBytes(PublicKey::from(&self.secret).to_bytes())
    }

    pub fn derive_session_key(&self, peer: &PublicKeyBytes, nonce: &Nonce) -> SessionKey {
        let shared = self.secret.diffie_hellman(&PublicKey::from(peer.0));
        let hk = Hkdf::<Sha256>::new(Some(&nonce.0), shared.as_bytes());
        let mut okm = [0u8; 32];
        hk.expand(SESSION_KDF_INFO, &mut okm)
            .expect("32 bytes is a valid HKDF-SHA256 output length");
        SessionKey(okm)
    }
}

impl fmt::Debug for EphemeralKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EphemeralKey(pub={})", self.public())
    }
}

/// Long-lived signing identity.
#[derive(Clone)]
pub struct IdentityKey {
    key_id: String,
    signing: SigningKey,
}

impl IdentityKey {
    pub fn generate(key_id: impl Into<String>, rng: &mut dyn RngCore) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(key_id, seed)
    }

    pub fn from_seed(key_id: impl Into<String>, seed: [u8; 32]) -> Self {
        Self {
            key_id: key_id.into(),
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn verifying_key(&self) -> PublicKeyBytes {
        PublicKeyBytes(self.signing.verifying_key().to_bytes())
    }
}

impl fmt::Debug for IdentityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IdentityKey({}, {})", self.key_id, self.verifying_key())
    }
}

/// The attesting side: an identity plus the measurement of what it runs.
#[derive(Debug, Clone)]
pub struct Attester {
    identity: IdentityKey,
    measurement: Measurement,
}

impl Attester {
    pub fn new(identity: IdentityKey, measurement: Measurement) -> Self {
        Self {
            identity,
            measurement,
        }
    }

    pub fn identity(&self) -> &IdentityKey {
        &self.identity
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    /// Signs fresh evidence over `nonce` with a new ephemeral key.
    pub fn produce_evidence(
        &self,
        nonce: Nonce,
        rng: &mut dyn RngCore,
    ) -> (AttestationEvidence, EphemeralKey) {
        let eph = EphemeralKey::generate(rng);
        let evidence = self.evidence_for(nonce, eph.public());
        (evidence, eph)
    }

    /// Signs evidence binding an existing key-agreement public key.
    pub fn evidence_for(&self, nonce: Nonce, public: PublicKeyBytes) -> AttestationEvidence {
        let digest = evidence_digest(&self.measurement, &nonce, &public);
        let signature = SignatureBytes(self.identity.signing.sign(&digest).to_bytes());
        AttestationEvidence {
            measurement: self.measurement,
            nonce,
            client_pub: public,
            signature,
            identity_key_id: self.identity.key_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthorizationPolicy {
    pub allowed_measurements: BTreeSet<Measurement>,
    pub identities: BTreeMap<String, PublicKeyBytes>,
    pub nonce_ttl_ms: u64,
    pub session_ttl_ms: u64,
    pub max_clock_skew_ms: u64,
}

impl Default for AuthorizationPolicy {
    fn default() -> Self {
        Self {
            allowed_measurements: BTreeSet::new(),
            identities: BTreeMap::new(),
            nonce_ttl_ms: DEFAULT_NONCE_TTL_MS,
            session_ttl_ms: DEFAULT_SESSION_TTL_MS,
            max_clock_skew_ms: 0,
        }
    }
}

/// On-disk policy shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    pub allowed_measurements: Vec<Measurement>,
    pub identities: BTreeMap<String, PublicKeyBytes>,
    #[serde(default = "default_nonce_ttl_secs")]
    pub nonce_ttl_secs: u64,
    #[serde(default = "default_session_ttl_secs")]
    pub session_ttl_secs: u64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub max_clock_skew_secs: u64,
}

fn default_nonce_ttl_secs() -> u64 {
    DEFAULT_NONCE_TTL_MS / 1000
}

fn default_session_ttl_secs() -> u64 {
    DEFAULT_SESSION_TTL_MS / 1000
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl AuthorizationPolicy {
    pub fn allow(mut self, m: Measurement) -> Self {
        self.allowed_measurements.insert(m);
        self
    }

    pub fn register(mut self, key_id: impl Into<String>, key: PublicKeyBytes) -> Self {
        self.identities.insert(key_id.into(), key);
        self
    }

    pub fn to_file(&self) -> PolicyFile {
        PolicyFile {
            allowed_measurements: self.allowed_measurements.iter().copied().collect(),
            identities: self.identities.clone(),
            nonce_ttl_secs: self.nonce_ttl_ms / 1000,
            session_ttl_secs: self.session_ttl_ms / 1000,
            max_clock_skew_secs: self.max_clock_skew_ms / 1000,
        }
    }

    pub fn from_file(file: PolicyFile) -> Result<Self, AttestationError> {
        if file.allowed_measurements.is_empty() {
            return Err(AttestationError::Policy("allowed_measurements is empty".into()));
        }
        for (id, key) in &file.identities {
            VerifyingKey::from_bytes(&key.0).map_err(|e| {
                AttestationError::InvalidKey(format!("identity {id}: {e}"))
            })?;
        }
        Ok(Self {
            allowed_measurements: file.allowed_measurements.into_iter().collect(),
            identities: file.identities,
            nonce_ttl_ms: file.nonce_ttl_secs * 1000,
            session_ttl_ms: file.session_ttl_secs * 1000,
            max_clock_skew_ms: file.max_clock_skew_secs * 1000,
        })
    }

    pub fn load(path: &Path) -> Result<Self, AttestationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AttestationError::Policy(format!("{}: {e}", path.display())))?;
        let file: PolicyFile =
            serde_json::from_str(&text).map_err(|e| AttestationError::Policy(e.to_string()))?;
        Self::from_file(file)
    }
}

/// Checks evidence against a policy and the nonce the verifier expects.
///
/// Order: identity, signature, nonce, measurement. Key agreement is left to
/// the caller.
pub fn verify_evidence(
    evidence: &AttestationEvidence,
    policy: &AuthorizationPolicy,
    expected_nonce: &Nonce,
) -> Result<(), AttestationError> {
    let key_bytes = policy
        .identities
        .get(&evidence.identity_key_id)
        .ok_or_else(|| AttestationError::UnknownIdentity(evidence.identity_key_id.clone()))?;
    let key = VerifyingKey::from_bytes(&key_bytes.0)
        .map_err(|e| AttestationError::InvalidKey(e.to_string()))?;
    let digest = evidence_digest(&evidence.measurement, &evidence.nonce, &evidence.client_pub);
    let signature = Signature::from_bytes(&evidence.signature.0);
    key.verify(&digest, &signature)
        .map_err(|_| AttestationError::BadSignature)?;
    if evidence.nonce != *expected_nonce {
        return Err(AttestationError::ReplayDetected);
    }
    if !policy.allowed_measurements.contains(&evidence.measurement) {
        return Err(AttestationError::MeasurementDenied(evidence.measurement.to_hex()));
    }
    Ok(())
}

/// An attested, keyed peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiloSession {
    pub client_id: String,
    pub session_key: SessionKey,
    pub established_at_ms: u64,
    pub expires_at_ms: u64,
    pub measurement: Measurement,
}

impl SiloSession {
    pub fn is_live(&self, now_ms: u64) -> bool {
        now_ms < self.expires_at_ms
    }
}

#[derive(Debug, Clone, Copy)]
struct Challenge {
    nonce: Nonce,
    expires_at_ms: u64,
}

/// Verifier-side handshake state: outstanding challenges and live sessions.
///
/// Client ids are the identity key ids registered in the policy.
#[derive(Debug)]
pub struct Gatekeeper {
    policy: RwLock<Arc<AuthorizationPolicy>>,
    challenges: Mutex<HashMap<String, Challenge>>,
    sessions: Mutex<HashMap<String, SiloSession>>,
}

impl Gatekeeper {
    pub fn new(policy: AuthorizationPolicy) -> Self {
        Self {
            policy: RwLock::new(Arc::new(policy)),
            challenges: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn policy(&self) -> Arc<AuthorizationPolicy> {
        self.policy.read().expect("policy lock").clone()
    }

    /// Atomically swaps the policy. Existing sessions are kept; the new
    /// policy applies from the next handshake.
    pub fn replace_policy(&self, policy: AuthorizationPolicy) {
        *self.policy.write().expect("policy lock") = Arc::new(policy);
    }

    /// Issues a fresh nonce; any previous challenge for the client is void.
    pub fn issue_challenge(
        &self,
        client_id: &str,
        now_ms: u64,
        rng: &mut dyn RngCore,
    ) -> Result<Nonce, AttestationError> {
        let policy = self.policy();
        if !policy.identities.contains_key(client_id) {
            return Err(AttestationError::UnknownClient(client_id.to_string()));
        }
        let nonce = Nonce::random(rng);
        self.challenges.lock().expect("challenge lock").insert(
            client_id.to_string(),
            Challenge {
                nonce,
                expires_at_ms: now_ms + policy.nonce_ttl_ms + policy.max_clock_skew_ms,
            },
        );
        Ok(nonce)
    }

    /// Verifies evidence against the outstanding challenge (consuming it)
    /// and, on success, derives and stores the session. Returns the session
    /// and the verifier's ephemeral public key for the peer.
    pub fn admit(
        &self,
        client_id: &str,
        evidence: &AttestationEvidence,
        now_ms: u64,
        rng: &mut dyn RngCore,
    ) -> Result<(SiloSession, PublicKeyBytes), AttestationError> {
        let challenge = self.challenges.lock().expect("challenge lock").remove(client_id);
        let result = self.check(client_id, evidence, challenge, now_ms);
        if let Err(e) = &result {
            tracing::warn!(client = client_id, error = %e, "attestation rejected");
            return Err(e.clone());
        }
        let policy = self.policy();
        let eph = EphemeralKey::generate(rng);
        let session = SiloSession {
            client_id: client_id.to_string(),
            session_key: eph.derive_session_key(&evidence.client_pub, &evidence.nonce),
            established_at_ms: now_ms,
            expires_at_ms: now_ms.saturating_add(policy.session_ttl_ms),
            measurement: evidence.measurement,
        };
        self.sessions
            .lock()
            .expect("session lock")
            .insert(client_id.to_string(), session.clone());
        tracing::debug!(client = client_id, measurement = %evidence.measurement, "session established");
        Ok((session, eph.public()))
    }

    fn check(
        &self,
        client_id: &str,
        evidence: &AttestationEvidence,
        challenge: Option<Challenge>,
        now_ms: u64,
    ) -> Result<(), AttestationError> {
        let policy = self.policy();
        if evidence.identity_key_id != client_id {
            return Err(AttestationError::UnknownIdentity(evidence.identity_key_id.clone()));
        }
        let Some(challenge) = challenge else {
            // Still report forged or unknown identities ahead of replay.
            verify_evidence(evidence, &policy, &evidence.nonce)?;
            return Err(AttestationError::ReplayDetected);
        };
        verify_evidence(evidence, &policy, &challenge.nonce)?;
        if now_ms > challenge.expires_at_ms {
            return Err(AttestationError::ReplayDetected);
        }
        Ok(())
    }

    pub fn live_session(&self, client_id: &str, now_ms: u64) -> Option<SiloSession> {
        let sessions = self.sessions.lock().expect("session lock");
        sessions.get(client_id).filter(|s| s.is_live(now_ms)).cloned()
    }

    /// Live sessions ordered by client id.
    pub fn live_sessions(&self, now_ms: u64) -> Vec<SiloSession> {
        let sessions = self.sessions.lock().expect("session lock");
        let mut live: Vec<SiloSession> =
            sessions.values().filter(|s| s.is_live(now_ms)).cloned().collect();
        live.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        live
    }

    pub fn revoke(&self, client_id: &str) -> bool {
        self.sessions.lock().expect("session lock").remove(client_id).is_some()
    }
}
