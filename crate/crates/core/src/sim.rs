//! Deterministic in-process federation for tests.
//!
//! Frames travel through a single event queue ordered by delivery time then
//! send order, on a [`VirtualClock`]. Silo connections are driven
//! synchronously when their frames are delivered, so a run is a pure
//! function of the seed and configuration. Every send is recorded in a
//! [`FrameLog`], including dropped and duplicated frames.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::{Attester, AuthorizationPolicy, IdentityKey, Measurement};
use crate::clock::{Clock, VirtualClock};
use crate::embedding::FeatureHashEmbedder;
use crate::eval::{read_snippets, run_benchmark, BenchError, BenchmarkQuestion, BenchmarkRun, IngestError};
use crate::index::{build_index, DocumentSnippet, IndexError, SnippetStore};
use crate::inference::confidential::{ConfidentialClient, InProcessConfidentialTransport, MockConfidentialEndpoint};
use crate::inference::http::MockProvider;
use crate::inference::prompt::PromptTemplate;
use crate::inference::stub::StubGenerator;
use crate::inference::{InferenceEngine, InferenceError, InferenceMode, Question};
use crate::protocol::{
    AnswerRecord, Envelope, FederationConfig, FederationError, HandshakeReport, Inbound, Link, ProtocolError,
    Server, SiloConnection, SiloService, SERVER_PEER,
};
use crate::wire_log::{FrameLog, FrameRecord};

pub const DEFAULT_N_CLIENTS: usize = 4;
pub const DEFAULT_PROVIDER_ANSWER: &str = "External model abstains.";
pub const DEFAULT_SIM_DIM: usize = 256;
pub const SERVER_ID: &str = "server";
pub const ENDPOINT_ID: &str = "confidential-endpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToClient,
    FromClient,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    Drop,
    Delay { ms: u64 },
    Duplicate,
    /// Flips one bit: inside the sealed payload for sealed frames,
    /// anywhere in the frame otherwise.
    Tamper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "when", rename_all = "snake_case")]
pub enum Trigger {
    Always,
    Probability { p: f64 },
    /// Zero-based indices among the frames this fault matches.
    Nth { indices: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Client id at the silo end of the hop, or `"*"`.
    pub target: String,
    pub direction: Direction,
    pub fault: FaultKind,
    pub trigger: Trigger,
    /// Envelope type to match, e.g. `"retrieval_response"`.
    #[serde(default)]
    pub frame_type: Option<String>,
}

impl FaultSpec {
    pub fn new(target: impl Into<String>, direction: Direction, fault: FaultKind) -> Self {
        Self {
            target: target.into(),
            direction,
            fault,
            trigger: Trigger::Always,
            frame_type: None,
        }
    }

    pub fn when(mut self, trigger: Trigger) -> Self {
        self.trigger = trigger;
        self
    }

    pub fn only(mut self, frame_type: impl Into<String>) -> Self {
        self.frame_type = Some(frame_type.into());
        self
    }

    fn applies(&self, peer: &str, to_client: bool, kind: Option<&str>) -> bool {
        let dir = match self.direction {
            Direction::Both => true,
            Direction::ToClient => to_client,
            Direction::FromClient => !to_client,
        };
        dir && (self.target == "*" || self.target == peer)
            && self.frame_type.as_deref().is_none_or(|t| Some(t) == kind)
    }
}

#[derive(Debug)]
struct Event {
    from: String,
    to: String,
    bytes: Vec<u8>,
}

struct NetInner {
    clock: VirtualClock,
    log: FrameLog,
    rng: ChaCha20Rng,
    latency_ms: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Event>,
    clients: BTreeMap<String, SiloConnection>,
    faults: Vec<(FaultSpec, usize)>,
}

fn flip_bit(bytes: &mut [u8], rng: &mut ChaCha20Rng) {
    if bytes.is_empty() {
        return;
    }
    let bit = rng.gen_range(0..bytes.len() * 8);
    bytes[bit / 8] ^= 1 << (bit % 8);
}

impl NetInner {
    fn enqueue(&mut self, at: u64, event: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), event);
    }

    fn record(&self, from: &str, to: &str, bytes: &[u8], dropped: bool, duplicate: bool, tampered: bool) {
        self.log.record(FrameRecord {
            seq: 0,
            at_ms: self.clock.now_ms(),
            from: from.to_string(),
            to: to.to_string(),
            bytes: bytes.to_vec(),
            dropped,
            duplicate,
            tampered,
        });
    }

    fn transmit(&mut self, from: &str, to: &str, mut bytes: Vec<u8>) {
        let to_client = from == SERVER_PEER;
        let peer = if to_client { to } else { from };
        let parsed = Envelope::from_bytes(&bytes).ok();
        let kind = parsed.as_ref().map(Envelope::kind);

        let (mut drop, mut delay, mut duplicate, mut tamper) = (false, 0u64, false, false);
        for (spec, matched) in self.faults.iter_mut() {
            if !spec.applies(peer, to_client, kind) {
                continue;
            }
            let index = *matched;
            *matched += 1;
            let fire = match &spec.trigger {
                Trigger::Always => true,
                Trigger::Probability { p } => self.rng.gen_bool(p.clamp(0.0, 1.0)),
                Trigger::Nth { indices } => indices.contains(&index),
            };
            if fire {
                match spec.fault {
                    FaultKind::Drop => drop = true,
                    FaultKind::Delay { ms } => delay += ms,
                    FaultKind::Duplicate => duplicate = true,
                    FaultKind::Tamper => tamper = true,
                }
            }
        }

        if tamper {
            match parsed {
                Some(mut env) if env.sealed_body().is_some_and(|b| !b.0.is_empty()) => {
                    let body = env.sealed_body_mut().expect("sealed frame");
                    flip_bit(&mut body.0, &mut self.rng);
                    bytes = env.to_bytes();
                }
                _ => flip_bit(&mut bytes, &mut self.rng),
            }
        }
        self.record(from, to, &bytes, drop, false, tamper);
        if drop {
            return;
        }
        let at = self.clock.now_ms() + self.latency_ms + delay;
        if duplicate {
            self.record(from, to, &bytes, false, true, tamper);
            self.enqueue(
                at,
                Event {
                    from: from.to_string(),
                    to: to.to_string(),
                    bytes: bytes.clone(),
                },
            );
        }
        self.enqueue(
            at,
            Event {
                from: from.to_string(),
                to: to.to_string(),
                bytes,
            },
        );
    }

    fn deliver_to_client(&mut self, event: Event) {
        let Some(conn) = self.clients.get_mut(&event.to) else {
            return;
        };
        let replies = conn.handle(&event.bytes);
        for reply in replies {
            self.transmit(&event.to, SERVER_PEER, reply);
        }
    }

    fn recv_until(&mut self, deadline_ms: u64) -> Option<Inbound> {
        loop {
            let next = self.queue.keys().next().copied();
            match next {
                Some(key) if key.0 <= deadline_ms => {
                    let event = self.queue.remove(&key).expect("queued event");
                    self.clock.advance_to(key.0);
                    if event.to == SERVER_PEER {
                        return Some(Inbound {
                            from: event.from,
                            bytes: event.bytes,
                        });
                    }
                    self.deliver_to_client(event);
                }
                _ => {
                    self.clock.advance_to(deadline_ms);
                    return None;
                }
            }
        }
    }

    /// Delivers every queued client-bound frame, leaving server-bound ones.
    fn settle(&mut self) {
        while let Some(key) = self
            .queue
            .iter()
            .find(|(_, e)| e.to != SERVER_PEER)
            .map(|(k, _)| *k)
        {
            let event = self.queue.remove(&key).expect("queued event");
            self.clock.advance_to(key.0);
            self.deliver_to_client(event);
        }
    }
}

/// Shared handle to the simulated network.
#[derive(Clone)]
pub struct SimNetwork {
    inner: Arc<Mutex<NetInner>>,
}

impl SimNetwork {
    pub fn new(clock: VirtualClock, log: FrameLog, seed: u64, latency_ms: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(NetInner {
                clock,
                log,
                rng: ChaCha20Rng::seed_from_u64(seed),
                latency_ms,
                seq: 0,
                queue: BTreeMap::new(),
                clients: BTreeMap::new(),
                faults: Vec::new(),
            })),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, NetInner> {
        self.inner.lock().expect("sim network lock")
    }

    pub fn add_client(&self, conn: SiloConnection) {
        let id = conn.client_id().to_string();
        self.lock().clients.insert(id, conn);
    }

    pub fn add_fault(&self, fault: FaultSpec) {
        self.lock().faults.push((fault, 0));
    }

    pub fn clear_faults(&self) {
        self.lock().faults.clear();
    }

    /// Queues a frame as if `from` had sent it, bypassing fault injection.
    pub fn inject_frame(&self, from: &str, to: &str, bytes: Vec<u8>) {
        let mut inner = self.lock();
        inner.record(from, to, &bytes, false, false, false);
        let at = inner.clock.now_ms() + inner.latency_ms;
        inner.enqueue(
            at,
            Event {
                from: from.to_string(),
                to: to.to_string(),
                bytes,
            },
        );
    }

    pub fn settle(&self) {
        self.lock().settle();
    }

    pub fn pending(&self) -> usize {
        self.lock().queue.len()
    }

    pub fn is_established(&self, client_id: &str) -> bool {
        self.lock()
            .clients
            .get(client_id)
            .is_some_and(SiloConnection::is_established)
    }

    pub fn link(&self) -> SimLink {
        SimLink { net: self.clone() }
    }
}

/// The server's end of a [`SimNetwork`].
pub struct SimLink {
    net: SimNetwork,
}

impl Link for SimLink {
    fn send(&mut self, to: &str, bytes: &[u8]) -> Result<(), ProtocolError> {
        self.net.lock().transmit(SERVER_PEER, to, bytes.to_vec());
        Ok(())
    }

    fn recv_until(&mut self, deadline_ms: u64) -> Option<Inbound> {
        self.net.lock().recv_until(deadline_ms)
    }

    fn now_ms(&self) -> u64 {
        self.net.lock().clock.now_ms()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum ProviderSetup {
    Fixed(String),
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_clients: usize,
    pub seed: u64,
    pub faults: Vec<FaultSpec>,
    /// One snippet file per client; the file stem is the client id.
    pub corpora: Vec<PathBuf>,
    /// Clients whose build manifest is altered, so their measurement is not
    /// on the allowlist.
    pub denied_clients: Vec<usize>,
    /// `clients` is filled in from the corpora.
    pub federation: FederationConfig,
    pub provider: ProviderSetup,
    pub latency_ms: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let federation = FederationConfig {
            embed_spec: crate::embedding::EmbedderSpec::feature_hash(DEFAULT_SIM_DIM),
            ..FederationConfig::default()
        };
        Self {
            n_clients: DEFAULT_N_CLIENTS,
            seed: 0,
            faults: Vec::new(),
            corpora: Vec::new(),
            denied_clients: Vec::new(),
            federation,
            provider: ProviderSetup::Fixed(DEFAULT_PROVIDER_ANSWER.to_string()),
            latency_ms: 1,
        }
    }
}

impl SimConfig {
    pub fn with_corpora(corpora: Vec<PathBuf>) -> Self {
        Self {
            n_clients: corpora.len(),
            corpora,
            ..Self::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("sim config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("confidential endpoint: {0}")]
    Endpoint(#[from] InferenceError),
}

/// Build manifest for a component; `patched` marks a modified build.
pub fn component_manifest(component: &str, patched: bool) -> serde_json::Value {
    let mut m = serde_json::json!({
        "component": component,
        "version": env!("CARGO_PKG_VERSION"),
        "config": "desk-scale",
    });
    if patched {
        m["patch"] = serde_json::json!("unreviewed-local-change");
    }
    m
}

fn child_rng(rng: &mut ChaCha20Rng) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(rng.next_u64())
}

pub struct SimFederation {
    server: Server,
    network: SimNetwork,
    clock: VirtualClock,
    log: FrameLog,
    provider: Arc<MockProvider>,
    handshake: HandshakeReport,
    client_ids: Vec<String>,
    snippets: Vec<DocumentSnippet>,
}

/// Assembles silos, server, mock endpoint and mock provider, and completes
/// every handshake.
pub fn build_sim(cfg: &SimConfig) -> Result<SimFederation, SimError> {
    if cfg.n_clients == 0 || cfg.n_clients > cfg.corpora.len() {
        return Err(SimError::Config(format!(
            "{} clients need as many corpora, found {}",
            cfg.n_clients,
            cfg.corpora.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let clock = VirtualClock::new();
    let shared_clock: Arc<dyn Clock> = Arc::new(clock.clone());
    let log = FrameLog::new();
    let network = SimNetwork::new(clock.clone(), log.clone(), rng.next_u64(), cfg.latency_ms);
    let spec = cfg.federation.embed_spec;
    let embedder = Arc::new(
        FeatureHashEmbedder::new(spec.dim, spec.normalize).map_err(|e| SimError::Config(e.to_string()))?,
    );

    let silo_measurement = Measurement::of_manifest(&component_manifest("fedrag-silo", false));
    let server_attester = Attester::new(
        IdentityKey::generate(SERVER_ID, &mut rng),
        Measurement::of_manifest(&component_manifest("fedrag-server", false)),
    );
    let server_policy = AuthorizationPolicy::default()
        .allow(server_attester.measurement())
        .register(SERVER_ID, server_attester.identity().verifying_key());

    let mut policy = AuthorizationPolicy::default().allow(silo_measurement);
    let mut client_ids = Vec::new();
    let mut snippets = Vec::new();
    for (i, path) in cfg.corpora.iter().take(cfg.n_clients).enumerate() {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| SimError::Config(format!("bad corpus path {}", path.display())))?
            .to_string();
        if client_ids.contains(&id) {
            return Err(SimError::Config(format!("duplicate client id {id}")));
        }
        let corpus = read_snippets(path, &id)?;
        let index = build_index(&corpus.snippets, embedder.as_ref())?;
        let mut store = SnippetStore::new();
        for s in &corpus.snippets {
            store.insert(s.clone());
        }
        snippets.extend(corpus.snippets);

        let identity = IdentityKey::generate(id.clone(), &mut rng);
        policy = policy.register(id.clone(), identity.verifying_key());
        let denied = cfg.denied_clients.contains(&i);
        let attester = Attester::new(
            identity,
            Measurement::of_manifest(&component_manifest("fedrag-silo", denied)),
        );
        let service = Arc::new(
            SiloService::new(attester, index, store, embedder.clone(), shared_clock.clone())
                .with_server_policy(server_policy.clone()),
        );
        network.add_client(service.connection(child_rng(&mut rng)));
        client_ids.push(id);
    }
    for fault in &cfg.faults {
        network.add_fault(fault.clone());
    }

    let template = PromptTemplate::default();
    let stub = Arc::new(StubGenerator::new(template.clone()));
    let provider = Arc::new(match &cfg.provider {
        ProviderSetup::Fixed(text) => MockProvider::fixed(text.clone()),
        ProviderSetup::Unavailable => MockProvider::unavailable(),
    });
    let endpoint_attester = Attester::new(
        IdentityKey::generate(ENDPOINT_ID, &mut rng),
        Measurement::of_manifest(&component_manifest("fedrag-confidential-endpoint", false)),
    );
    let endpoint_policy = AuthorizationPolicy::default()
        .allow(endpoint_attester.measurement())
        .register(ENDPOINT_ID, endpoint_attester.identity().verifying_key());
    let endpoint = Arc::new(MockConfidentialEndpoint::new(
        endpoint_attester,
        stub.clone(),
        template.clone(),
        rng.next_u64(),
    ));
    let transport = InProcessConfidentialTransport::new(endpoint).with_log(log.clone(), shared_clock.clone());
    let confidential = Arc::new(ConfidentialClient::new(
        Arc::new(transport),
        endpoint_policy,
        shared_clock.clone(),
    ));
    confidential.handshake(&mut rng)?;
    let engine = InferenceEngine::new(template, stub, shared_clock.clone())
        .with_provider(provider.clone())
        .with_confidential(confidential);

    let mut federation = cfg.federation.clone();
    federation.clients = client_ids.clone();
    federation.min_responders = federation.min_responders.min(client_ids.len()).max(1);
    let server = Server::new(
        federation,
        server_attester,
        policy,
        engine,
        Box::new(network.link()),
        child_rng(&mut rng),
    )?;
    let handshake = server.handshake_all();
    network.settle();
    Ok(SimFederation {
        server,
        network,
        clock,
        log,
        provider,
        handshake,
        client_ids,
        snippets,
    })
}

impl SimFederation {
    pub fn handle_query(&self, question: &Question) -> Result<AnswerRecord, FederationError> {
        self.server.handle_query(question)
    }

    pub fn handle_query_as(&self, question: &Question, mode: InferenceMode) -> Result<AnswerRecord, FederationError> {
        self.server.handle_query_as(question, mode)
    }

    pub fn run_benchmark(
        &self,
        dataset: &str,
        questions: &[BenchmarkQuestion],
        mode: InferenceMode,
    ) -> Result<BenchmarkRun, BenchError> {
        run_benchmark(&self.server, dataset, questions, mode)
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn network(&self) -> &SimNetwork {
        &self.network
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn frame_log(&self) -> &FrameLog {
        &self.log
    }

    /// Every prompt the mock third-party provider received.
    pub fn provider_prompts(&self) -> Vec<String> {
        self.provider.prompts()
    }

    pub fn handshake_report(&self) -> &HandshakeReport {
        &self.handshake
    }

    pub fn client_ids(&self) -> &[String] {
        &self.client_ids
    }

    /// All snippets held by any silo.
    pub fn snippets(&self) -> &[DocumentSnippet] {
        &self.snippets
    }

    pub fn live_sessions(&self) -> Vec<String> {
        let now = self.clock.now_ms();
        self.server
            .gatekeeper()
            .live_sessions(now)
            .into_iter()
            .map(|s| s.client_id)
            .collect()
    }
}
