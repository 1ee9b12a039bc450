//! Shared record of bytes put on simulated wires, for confidentiality scans
//! and determinism checks.

use std::sync::{Arc, Mutex};

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrameRecord {
    pub seq: u64,
    pub at_ms: u64,
    pub from: String,
    pub to: String,
    /// Exact bytes as sent (after any injected tampering).
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
    pub dropped: bool,
    pub duplicate: bool,
    pub tampered: bool,
}

mod hex_bytes {
    pub fn serialize<S: serde::Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }
}

#[derive(Debug, Clone, Default)]
pub struct FrameLog {
    inner: Arc<Mutex<Vec<FrameRecord>>>,
}

impl FrameLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, mut rec: FrameRecord) {
        let mut frames = self.inner.lock().expect("frame log lock");
        rec.seq = frames.len() as u64;
        frames.push(rec);
    }

    /// Convenience for a plain, untampered send.
    pub fn record_send(&self, at_ms: u64, from: &str, to: &str, bytes: &[u8]) {
        self.record(FrameRecord {
            seq: 0,
            at_ms,
            from: from.to_string(),
            to: to.to_string(),
            bytes: bytes.to_vec(),
            dropped: false,
            duplicate: false,
            tampered: false,
        });
    }

    pub fn snapshot(&self) -> Vec<FrameRecord> {
        self.inner.lock().expect("frame log lock").clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("frame log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frames whose bytes contain `needle`.
    pub fn find(&self, needle: &[u8]) -> Vec<FrameRecord> {
        if needle.is_empty() {
            return Vec::new();
        }
        self.snapshot()
            .into_iter()
            .filter(|f| f.bytes.windows(needle.len()).any(|w| w == needle))
            .collect()
    }
}
