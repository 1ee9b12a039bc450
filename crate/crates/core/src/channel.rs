//! Message-layer authenticated encryption (ChaCha20-Poly1305).
//!
//! Nonces are `epoch (4 bytes BE) ‖ counter (8 bytes BE)`. Each sender owns
//! one epoch per key and increments the counter for every message; the
//! receiver rejects any counter at or below the highest it has accepted for
//! that epoch.
//!
//! Wire encoding of [`EncryptedPayload`]:
//!
//! ```text
//! key_id_len u16 BE | key_id utf8 | nonce [12] | aad_len u32 BE | aad
//!   | ct_len u32 BE | ciphertext | tag [16]
//! ```

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use thiserror::Error;

use crate::attestation::SessionKey;

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const DEFAULT_MAX_PLAINTEXT: usize = 4 * 1024 * 1024;

/// Sender epochs by role. Both ends of a session share one key, so each
/// direction needs its own nonce space.
pub const EPOCH_SILO: u32 = 0x5349_4c4f; // "SILO"
pub const EPOCH_SERVER: u32 = 0x5352_5652; // "SRVR"
pub const EPOCH_ENDPOINT: u32 = 0x4352_4320; // "CRC "

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    /// Any integrity failure. Deliberately carries no detail.
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("payload of {size} bytes exceeds limit of {limit}")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("nonce counter exhausted; session must be closed")]
    NonceExhausted,
    #[error("replayed or reordered payload")]
    ReplayDetected,
    #[error("malformed payload encoding: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedPayload {
    pub key_id: String,
    pub nonce: [u8; NONCE_LEN],
    pub aad: Vec<u8>,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl EncryptedPayload {
    pub fn epoch(&self) -> u32 {
        u32::from_be_bytes(self.nonce[..4].try_into().unwrap())
    }

    pub fn counter(&self) -> u64 {
        u64::from_be_bytes(self.nonce[4..].try_into().unwrap())
    }

    pub fn encode(&self) -> Vec<u8> {
        let key_id = self.key_id.as_bytes();
        let mut out = Vec::with_capacity(
            2 + key_id.len() + NONCE_LEN + 4 + self.aad.len() + 4 + self.ciphertext.len() + TAG_LEN,
        );
        out.extend_from_slice(&(key_id.len() as u16).to_be_bytes());
        out.extend_from_slice(key_id);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.aad.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.aad);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ChannelError> {
        let mut r = Reader { buf: bytes };
        let key_len = u16::from_be_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let key_id = std::str::from_utf8(r.take(key_len)?)
            .map_err(|_| ChannelError::Malformed("key_id is not utf-8"))?
            .to_string();
        let nonce = r.take(NONCE_LEN)?.try_into().unwrap();
        let aad_len = u32::from_be_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let aad = r.take(aad_len)?.to_vec();
        let ct_len = u32::from_be_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let ciphertext = r.take(ct_len)?.to_vec();
        let tag = r.take(TAG_LEN)?.try_into().unwrap();
        if !r.buf.is_empty() {
            return Err(ChannelError::Malformed("trailing bytes"));
        }
        Ok(Self {
            key_id,
            nonce,
            aad,
            ciphertext,
            tag,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ChannelError> {
        if self.buf.len() < n {
            return Err(ChannelError::Malformed("truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
}

/// Plain ChaCha20-Poly1305 (RFC 8439) with a detached tag.
pub fn aead_encrypt(
    key: &SessionKey,
    nonce: &[u8; NONCE_LEN],
    associated: &[u8],
    plaintext: &[u8],
) -> (Vec<u8>, [u8; TAG_LEN]) {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(nonce), associated, &mut buf)
        .expect("plaintext length is bounded well below the ChaCha20 limit");
    (buf, tag.into())
}

pub fn aead_decrypt(
    key: &SessionKey,
    nonce: &[u8; NONCE_LEN],
    associated: &[u8],
    ciphertext: &[u8],
    tag: &[u8; TAG_LEN],
) -> Result<Vec<u8>, ChannelError> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
    let mut buf = ciphertext.to_vec();
    cipher
        .decrypt_in_place_detached(Nonce::from_slice(nonce), associated, &mut buf, Tag::from_slice(tag))
        .map_err(|_| ChannelError::AuthenticationFailure)?;
    Ok(buf)
}

/// The AEAD associated data also covers the key id, so no byte of the
/// wire encoding can change without failing authentication.
fn bound_associated_data(key_id: &str, aad: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + key_id.len() + aad.len());
    out.extend_from_slice(&(key_id.len() as u16).to_be_bytes());
    out.extend_from_slice(key_id.as_bytes());
    out.extend_from_slice(aad);
    out
}

/// Seals with an explicit nonce. Callers normally go through [`Sealer`].
pub fn seal_with_nonce(
    key: &SessionKey,
    key_id: &str,
    nonce: [u8; NONCE_LEN],
    aad: &[u8],
    plaintext: &[u8],
) -> EncryptedPayload {
    let (ciphertext, tag) = aead_encrypt(key, &nonce, &bound_associated_data(key_id, aad), plaintext);
    EncryptedPayload {
        key_id: key_id.to_string(),
        nonce,
        aad: aad.to_vec(),
        ciphertext,
        tag,
    }
}

/// Verifies and decrypts. Every integrity failure maps to the same error.
pub fn open(key: &SessionKey, payload: &EncryptedPayload) -> Result<Vec<u8>, ChannelError> {
    aead_decrypt(
        key,
        &payload.nonce,
        &bound_associated_data(&payload.key_id, &payload.aad),
        &payload.ciphertext,
        &payload.tag,
    )
}

/// Decodes and opens wire bytes; malformed input is reported as
/// [`ChannelError::AuthenticationFailure`] too.
pub fn open_wire(key: &SessionKey, bytes: &[u8]) -> Result<(EncryptedPayload, Vec<u8>), ChannelError> {
    let payload =
        EncryptedPayload::decode(bytes).map_err(|_| ChannelError::AuthenticationFailure)?;
    let plaintext = open(key, &payload)?;
    Ok((payload, plaintext))
}

/// Sending half of a keyed channel. Safe to share across threads.
#[derive(Debug)]
pub struct Sealer {
    key: SessionKey,
    key_id: String,
    epoch: u32,
    next_counter: AtomicU64,
    max_plaintext: usize,
}

impl Sealer {
    pub fn new(key: SessionKey, key_id: impl Into<String>, epoch: u32) -> Self {
        Self {
            key,
            key_id: key_id.into(),
            epoch,
            next_counter: AtomicU64::new(0),
            max_plaintext: DEFAULT_MAX_PLAINTEXT,
        }
    }

    pub fn with_max_plaintext(mut self, limit: usize) -> Self {
        self.max_plaintext = limit;
        self
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn seal(&self, aad: &[u8], plaintext: &[u8]) -> Result<EncryptedPayload, ChannelError> {
        if plaintext.len() > self.max_plaintext {
            return Err(ChannelError::PayloadTooLarge {
                size: plaintext.len(),
                limit: self.max_plaintext,
            });
        }
        let counter = self
            .next_counter
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| c.checked_add(1))
            .map_err(|_| ChannelError::NonceExhausted)?;
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..4].copy_from_slice(&self.epoch.to_be_bytes());
        nonce[4..].copy_from_slice(&counter.to_be_bytes());
        Ok(seal_with_nonce(&self.key, &self.key_id, nonce, aad, plaintext))
    }

    #[cfg(test)]
    fn set_counter(&self, c: u64) {
        self.next_counter.store(c, Ordering::SeqCst);
    }
}

/// Receiving half: authenticates, then enforces the per-epoch high-water
/// counter. Only successfully authenticated payloads move the mark.
#[derive(Debug)]
pub struct Opener {
    key: SessionKey,
    expected_epoch: Option<u32>,
    high_water: Mutex<HashMap<u32, u64>>,
}

impl Opener {
    pub fn new(key: SessionKey) -> Self {
        Self {
            key,
            expected_epoch: None,
            high_water: Mutex::new(HashMap::new()),
        }
    }

    /// Only accept payloads sealed under `epoch`.
    pub fn expecting_epoch(mut self, epoch: u32) -> Self {
        self.expected_epoch = Some(epoch);
        self
    }

    pub fn open_wire(&self, bytes: &[u8]) -> Result<(EncryptedPayload, Vec<u8>), ChannelError> {
        let payload =
            EncryptedPayload::decode(bytes).map_err(|_| ChannelError::AuthenticationFailure)?;
        let plaintext = self.open(&payload)?;
        Ok((payload, plaintext))
    }

    pub fn open(&self, payload: &EncryptedPayload) -> Result<Vec<u8>, ChannelError> {
        let plaintext = open(&self.key, payload)?;
        let epoch = payload.epoch();
        if self.expected_epoch.is_some_and(|e| e != epoch) {
            return Err(ChannelError::ReplayDetected);
        }
        let counter = payload.counter();
        let mut marks = self.high_water.lock().expect("high-water lock");
        match marks.get(&epoch) {
            Some(&mark) if counter <= mark => Err(ChannelError::ReplayDetected),
            _ => {
                marks.insert(epoch, counter);
                Ok(plaintext)
            }
        }
    }
}
