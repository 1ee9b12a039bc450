//! Federated retrieval-augmented generation.
//!
//! Silos answer a query from private flat-L2 indexes; an attested server
//! fuses their top-k lists with Reciprocal Rank Fusion, builds a prompt and
//! generates an answer through a standalone, cascading or confidential
//! backend. Document payloads travel only inside AEAD-sealed envelopes keyed
//! by attestation-bound sessions.

pub mod attestation;
pub mod channel;
pub mod clock;
pub mod embedding;
pub mod fusion;
pub mod index;
pub mod inference;
pub mod wire_log;
pub mod protocol;
pub mod eval;
pub mod sim;
