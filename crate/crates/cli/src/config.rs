//! TOML configuration for `serve-silo`, `serve-server`, `query` and `bench`.
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use fedrag_core::protocol::FederationConfig;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiloFile {
    pub silo: SiloSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiloSection {
    pub listen: String,
    /// Directory written by `fedrag ingest`.
    pub data_dir: PathBuf,
    /// Key file from `fedrag keygen`; its key id is the client id.
    pub identity_key: PathBuf,
    pub manifest: PathBuf,
    /// If set, the server must attest against this policy.
    #[serde(default)]
    pub server_policy: Option<PathBuf>,
    /// Required when the index was built with an external embedder.
    #[serde(default)]
    pub embedder_url: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerFile {
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub federation: FederationConfig,
    pub transport: Transport,
    #[serde(default)]
    pub inference: InferenceSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    pub identity_key: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Silo authorization policy.
    pub policy: Option<PathBuf>,
    /// JSONL line per query.
    pub query_log: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transport {
    /// Whole federation in-process with mocks, driven by a seed.
    Sim {
        corpora: Vec<PathBuf>,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        denied_clients: Vec<usize>,
        #[serde(default = "one")]
        latency_ms: u64,
    },
    Tcp {
        clients: Vec<ClientEndpoint>,
        #[serde(default = "default_connect_timeout")]
        connect_timeout_ms: u64,
    },
}

fn one() -> u64 {
    1
}

fn default_connect_timeout() -> u64 {
    5_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientEndpoint {
    pub id: String,
    pub addr: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    #[serde(default)]
    pub generator: GeneratorConfig,
    /// Omitted: the sim uses its mock provider, TCP runs without one.
    #[serde(default)]
    pub provider: Option<ProviderConfig>,
    #[serde(default)]
    pub confidential: Option<ConfidentialConfig>,
    #[serde(default = "default_backend_timeout")]
    pub timeout_ms: u64,
}

fn default_backend_timeout() -> u64 {
    60_000
}

#[derive(Debug, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    #[default]
    Stub,
    Openai {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    None,
    Mock { text: String },
    Http { base_url: String },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConfidentialConfig {
    /// In-process endpoint with fresh keys.
    Mock,
    Http { base_url: String, policy: PathBuf },
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn base_dir(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_server_config_parses() {
        let cfg: ServerFile = toml::from_str(
            r#"
            [federation]
            top_k = 8
            min_responders = 2
            inference_mode = "cascading"

            [federation.embed_spec]
            kind = "feature_hash"
            dim = 256
            normalize = true

            [transport]
            kind = "sim"
            corpora = ["a.jsonl", "b.jsonl"]
            seed = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.federation.min_responders, 2);
        assert_eq!(cfg.federation.k_rrf, 60);
        assert!(matches!(cfg.transport, Transport::Sim { seed: 3, .. }));
        assert!(matches!(cfg.inference.generator, GeneratorConfig::Stub));
    }

    #[test]
    fn tcp_config_parses() {
        let cfg: ServerFile = toml::from_str(
            r#"
            [server]
            identity_key = "keys/server.json"
            manifest = "server-manifest.json"
            policy = "silo-policy.json"

            [transport]
            kind = "tcp"
            clients = [{ id = "pubmed", addr = "127.0.0.1:7101" }]

            [inference]
            provider = { kind = "http", base_url = "http://127.0.0.1:9000" }
            generator = { kind = "openai", base_url = "http://127.0.0.1:8000", model = "smollm" }
            "#,
        )
        .unwrap();
        let Transport::Tcp { clients, connect_timeout_ms } = cfg.transport else {
            panic!("expected tcp");
        };
        assert_eq!((clients[0].id.as_str(), connect_timeout_ms), ("pubmed", 5_000));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ServerFile>("[transport]\nkind = \"sim\"\ncorpora = []\nbogus = 1\n");
        assert!(err.is_err());
    }
}
