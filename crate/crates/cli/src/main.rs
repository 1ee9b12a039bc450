mod config;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use fedrag_core::attestation::{
    Attester, AuthorizationPolicy, IdentityKey, Measurement, PolicyFile, DEFAULT_NONCE_TTL_MS,
    DEFAULT_SESSION_TTL_MS,
};
use fedrag_core::clock::{Clock, SystemClock};
use fedrag_core::embedding::{Embedder, EmbedderKind, FeatureHashEmbedder, HttpEmbedder};
use fedrag_core::eval::{
    ingest_corpus, load_questions, load_silo, run_benchmark, BenchError, BenchmarkRun, Report, TimeUnit,
};
use fedrag_core::inference::confidential::{
    ConfidentialClient, InProcessConfidentialTransport, MockConfidentialEndpoint,
};
use fedrag_core::inference::http::{HttpConfidentialTransport, HttpProvider, MockProvider, OpenAiChatGenerator};
use fedrag_core::inference::prompt::PromptTemplate;
use fedrag_core::inference::stub::StubGenerator;
use fedrag_core::inference::{AnswerOption, Generator, InferenceEngine, InferenceMode, Question};
use fedrag_core::protocol::tcp::{SiloListener, TcpLink};
use fedrag_core::protocol::{Server, SiloService};
use fedrag_core::sim::{build_sim, component_manifest, ProviderSetup, SimConfig, SimFederation};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use config::{
    base_dir, read_toml, resolve, ConfidentialConfig, GeneratorConfig, ProviderConfig, ServerFile, SiloFile,
    Transport,
};

/// Writes a line to stdout; a closed pipe is not an error.
macro_rules! outln {
    ($($arg:tt)*) => {{
        let _ = writeln!(io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "fedrag", version, about = "Federated retrieval-augmented generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create an identity key file.
    Keygen {
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
        /// Register the public key in this policy file (created if missing).
        #[arg(long)]
        register_in: Option<PathBuf>,
    },
    /// Print the measurement of a manifest, or write a default one.
    Measure {
        #[arg(long)]
        manifest: PathBuf,
        /// Write a default manifest for this component first.
        #[arg(long)]
        init: Option<String>,
        /// Add the measurement to this policy file (created if missing).
        #[arg(long)]
        allow_in: Option<PathBuf>,
    },
    /// Embed a snippet JSONL file into a silo directory.
    Ingest {
        /// Silo data directory; its name is the silo id.
        #[arg(long)]
        silo: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long)]
        no_normalize: bool,
    },
    /// Serve a silo over TCP.
    ServeSilo {
        #[arg(long)]
        config: PathBuf,
    },
    /// Attest silos, then answer questions read from stdin as JSON lines.
    ServeServer {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one query and print the answer record.
    Query {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        text: String,
        /// Answer option as LABEL=TEXT; repeatable.
        #[arg(long = "option")]
        options: Vec<String>,
        #[arg(long)]
        mode: Option<InferenceMode>,
    },
    /// Run a question set and print a mode × dataset table.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::All)]
        mode: ModeArg,
        /// Directory for report.txt, report.json and runs.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset column name; defaults to the question file stem.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, value_enum, default_value_t = UnitArg::Ms)]
        time_unit: UnitArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    All,
    Standalone,
    Cascading,
    Confidential,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitArg {
    Ms,
    S,
}

enum Failure {
    Config(String),
    Federation(String),
    Abort(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Federation(_) => 3,
            Self::Abort(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Config(m) | Self::Federation(m) | Self::Abort(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    key_id: String,
    seed: String,
}

fn load_identity(path: &Path) -> Result<IdentityKey, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let file: KeyFile = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let seed: [u8; 32] = hex::decode(&file.seed)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| config_err(format!("{}: seed must be 32 hex bytes", path.display())))?;
    Ok(IdentityKey::from_seed(file.key_id, seed))
}

fn load_measurement(path: &Path) -> Result<Measurement, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let manifest: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Ok(Measurement::of_manifest(&manifest))
}

fn load_policy(path: &Path) -> Result<AuthorizationPolicy, Failure> {
    AuthorizationPolicy::load(path).map_err(config_err)
}

fn edit_policy_file(path: &Path, edit: impl FnOnce(&mut PolicyFile)) -> Result<(), Failure> {
    let mut file = if path.exists() {
        let text = fs::read_to_string(path).map_err(config_err)?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?
    } else {
        PolicyFile {
            allowed_measurements: Vec::new(),
            identities: BTreeMap::new(),
            nonce_ttl_secs: DEFAULT_NONCE_TTL_MS / 1000,
            session_ttl_secs: DEFAULT_SESSION_TTL_MS / 1000,
            max_clock_skew_secs: 0,
        }
    };
    edit(&mut file);
    let json = serde_json::to_string_pretty(&file).expect("policy serializes");
    fs::write(path, json + "\n").map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_secret(path: &Path, contents: &str) -> io::Result<()> {
    let mut opts = OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    opts.open(path)?.write_all(contents.as_bytes())
}

fn keygen(id: &str, out: &Path, register_in: Option<&Path>) -> Result<(), Failure> {
    let key = IdentityKey::generate(id, &mut ChaCha20Rng::from_entropy());
    let file = KeyFile {
        key_id: id.to_string(),
        seed: hex::encode(key.seed()),
    };
    write_secret(out, &serde_json::to_string_pretty(&file).expect("key serializes"))
        .map_err(|e| config_err(format!("{}: {e}", out.display())))?;
    if let Some(policy) = register_in {
        edit_policy_file(policy, |p| {
            p.identities.insert(id.to_string(), key.verifying_key());
        })?;
    }
    outln!(
        "{}",
        serde_json::json!({"key_id": id, "public_key": key.verifying_key().to_hex()})
    );
    Ok(())
}

fn measure(manifest: &Path, init: Option<&str>, allow_in: Option<&Path>) -> Result<(), Failure> {
    if let Some(component) = init {
        let json = serde_json::to_string_pretty(&component_manifest(component, false)).expect("manifest");
        fs::write(manifest, json + "\n").map_err(|e| config_err(format!("{}: {e}", manifest.display())))?;
    }
    let m = load_measurement(manifest)?;
    if let Some(policy) = allow_in {
        edit_policy_file(policy, |p| {
            if !p.allowed_measurements.contains(&m) {
                p.allowed_measurements.push(m);
            }
        })?;
    }
    outln!("{m}");
    Ok(())
}

fn ingest(silo: &Path, input: &Path, dim: usize, normalize: bool) -> Result<(), Failure> {
    let silo_id = silo
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| config_err("silo directory needs a name"))?;
    let embedder = FeatureHashEmbedder::new(dim, normalize).map_err(config_err)?;
    let report = ingest_corpus(input, silo, silo_id, &embedder).map_err(config_err)?;
    outln!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn serve_silo(config_path: &Path) -> Result<(), Failure> {
    let base = base_dir(config_path);
    let cfg: SiloFile = read_toml(config_path).map_err(Failure::Config)?;
    let s = cfg.silo;
    let identity = load_identity(&resolve(&base, &s.identity_key))?;
    let measurement = load_measurement(&resolve(&base, &s.manifest))?;
    let (index, store) = load_silo(&resolve(&base, &s.data_dir)).map_err(config_err)?;
    let spec = index.spec();
    let embedder: Arc<dyn Embedder> = match spec.kind {
        EmbedderKind::FeatureHash => Arc::new(FeatureHashEmbedder::new(spec.dim, spec.normalize).map_err(config_err)?),
        EmbedderKind::External => {
            let url = s
                .embedder_url
                .ok_or_else(|| config_err("index uses an external embedder; set silo.embedder_url"))?;
            Arc::new(HttpEmbedder::new(url, spec.dim, spec.normalize, Duration::from_secs(30)))
        }
    };
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
    let mut service = SiloService::new(Attester::new(identity, measurement), index, store, embedder, clock);
    if let Some(p) = &s.server_policy {
        service = service.with_server_policy(load_policy(&resolve(&base, p))?);
    }
    let listener = TcpListener::bind(&s.listen).map_err(|e| config_err(format!("bind {}: {e}", s.listen)))?;
    let listener = SiloListener::spawn(listener, Arc::new(service)).map_err(config_err)?;
    eprintln!("silo listening on {}", listener.local_addr());
    listener.join();
    Ok(())
}

enum Federation {
    Sim(Box<SimFederation>),
    Tcp(Box<Server>),
}

impl Federation {
    fn server(&self) -> &Server {
        match self {
            Self::Sim(sim) => sim.server(),
            Self::Tcp(server) => server,
        }
    }
}

fn build_generator(cfg: &GeneratorConfig, template: &PromptTemplate, timeout: Duration) -> Result<Arc<dyn Generator>, Failure> {
    Ok(match cfg {
        GeneratorConfig::Stub => Arc::new(StubGenerator::new(template.clone())),
        GeneratorConfig::Openai {
            base_url,
            model,
            api_key_env,
        } => {
            let mut g = OpenAiChatGenerator::new(base_url.clone(), model.clone(), timeout);
            if let Some(var) = api_key_env {
                let key = std::env::var(var).map_err(|_| config_err(format!("environment variable {var} is not set")))?;
                g = g.with_api_key(key);
            }
            Arc::new(g)
        }
    })
}

fn start_federation(config_path: &Path) -> Result<Federation, Failure> {
    let base = base_dir(config_path);
    let cfg: ServerFile = read_toml(config_path).map_err(Failure::Config)?;
    let federation = match cfg.transport {
        Transport::Sim {
            corpora,
            seed,
            denied_clients,
            latency_ms,
        } => {
            if !matches!(cfg.inference.generator, GeneratorConfig::Stub) {
                return Err(config_err("the sim transport only supports the stub generator"));
            }
            if matches!(cfg.inference.confidential, Some(ConfidentialConfig::Http { .. })) {
                return Err(config_err("the sim transport uses its own confidential endpoint"));
            }
            let provider = match cfg.inference.provider {
                None => SimConfig::default().provider,
                Some(ProviderConfig::Mock { text }) => ProviderSetup::Fixed(text),
                Some(ProviderConfig::None) => ProviderSetup::Unavailable,
                Some(ProviderConfig::Http { .. }) => {
                    return Err(config_err("the sim transport only supports the mock provider"))
                }
            };
            let corpora: Vec<PathBuf> = corpora.iter().map(|p| resolve(&base, p)).collect();
            let sim_cfg = SimConfig {
                n_clients: corpora.len(),
                seed,
                corpora,
                denied_clients,
                federation: cfg.federation,
                provider,
                latency_ms,
                ..SimConfig::default()
            };
            let sim = build_sim(&sim_cfg).map_err(|e| match e {
                fedrag_core::sim::SimError::Federation(e) => config_err(e),
                other => Failure::Config(other.to_string()),
            })?;
            Federation::Sim(Box::new(sim))
        }
        Transport::Tcp {
            clients,
            connect_timeout_ms,
        } => {
            let need = |p: &Option<PathBuf>, name: &str| {
                p.as_ref()
                    .map(|p| resolve(&base, p))
                    .ok_or_else(|| config_err(format!("server.{name} is required for the tcp transport")))
            };
            let identity = load_identity(&need(&cfg.server.identity_key, "identity_key")?)?;
            let measurement = load_measurement(&need(&cfg.server.manifest, "manifest")?)?;
            let policy = load_policy(&need(&cfg.server.policy, "policy")?)?;

            let template = PromptTemplate::default();
            let timeout = Duration::from_millis(cfg.inference.timeout_ms);
            let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
            let generator = build_generator(&cfg.inference.generator, &template, timeout)?;
            let mut engine = InferenceEngine::new(template.clone(), generator.clone(), clock.clone());
            match &cfg.inference.provider {
                None | Some(ProviderConfig::None) => {}
                Some(ProviderConfig::Mock { text }) => engine = engine.with_provider(Arc::new(MockProvider::fixed(text.clone()))),
                Some(ProviderConfig::Http { base_url }) => {
                    engine = engine.with_provider(Arc::new(HttpProvider::new(base_url.clone(), "http-provider", timeout)))
                }
            }
            let mut rng = ChaCha20Rng::from_entropy();
            let confidential = match &cfg.inference.confidential {
                None => None,
                Some(ConfidentialConfig::Mock) => {
                    let attester = Attester::new(
                        IdentityKey::generate("confidential-endpoint", &mut rng),
                        Measurement::of_manifest(&component_manifest("fedrag-confidential-endpoint", false)),
                    );
                    let policy = AuthorizationPolicy::default()
                        .allow(attester.measurement())
                        .register("confidential-endpoint", attester.identity().verifying_key());
                    let endpoint = MockConfidentialEndpoint::new(attester, generator, template, rand::random());
                    let transport = InProcessConfidentialTransport::new(Arc::new(endpoint));
                    Some(ConfidentialClient::new(Arc::new(transport), policy, clock.clone()))
                }
                Some(ConfidentialConfig::Http { base_url, policy }) => {
                    let policy = load_policy(&resolve(&base, policy))?;
                    let transport = HttpConfidentialTransport::new(base_url.clone(), timeout);
                    Some(ConfidentialClient::new(Arc::new(transport), policy, clock.clone()))
                }
            };
            if let Some(client) = confidential {
                client
                    .handshake(&mut rng)
                    .map_err(|e| Failure::Federation(format!("confidential endpoint: {e}")))?;
                engine = engine.with_confidential(Arc::new(client));
            }

            let mut federation = cfg.federation;
            federation.clients = clients.iter().map(|c| c.id.clone()).collect();
            let peers: Vec<(String, String)> = clients.iter().map(|c| (c.id.clone(), c.addr.clone())).collect();
            let (link, failures) = TcpLink::connect(&peers, Duration::from_millis(connect_timeout_ms));
            for (id, e) in &failures {
                eprintln!("warning: cannot connect to {id}: {e}");
            }
            let server = Server::new(
                federation,
                Attester::new(identity, measurement),
                policy,
                engine,
                Box::new(link),
                ChaCha20Rng::from_entropy(),
            )
            .map_err(config_err)?;
            let report = server.handshake_all();
            eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
            if report.established.is_empty() {
                return Err(Failure::Federation("no silo completed attestation".into()));
            }
            Federation::Tcp(Box::new(server))
        }
    };
    if let Some(path) = &cfg.server.query_log {
        let path = resolve(&base, path);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        federation.server().set_query_log(Box::new(file));
    }
    Ok(federation)
}

fn parse_options(raw: &[String]) -> Result<Vec<AnswerOption>, Failure> {
    raw.iter()
        .map(|o| {
            o.split_once('=')
                .map(|(l, t)| AnswerOption::new(l.trim(), t.trim()))
                .ok_or_else(|| config_err(format!("option {o:?} must be LABEL=TEXT")))
        })
        .collect()
}

fn query(config_path: &Path, text: &str, options: &[String], mode: Option<InferenceMode>) -> Result<(), Failure> {
    let question = Question {
        text: text.to_string(),
        options: parse_options(options)?,
    };
    let federation = start_federation(config_path)?;
    let server = federation.server();
    let mode = mode.unwrap_or(server.config().inference_mode);
    let record = server
        .handle_query_as(&question, mode)
        .map_err(|e| Failure::Federation(e.to_string()))?;
    outln!("{}", serde_json::to_string_pretty(&record).expect("record serializes"));
    Ok(())
}

#[derive(Deserialize)]
struct StdinQuestion {
    text: String,
    #[serde(default)]
    options: BTreeMap<String, String>,
    #[serde(default)]
    mode: Option<InferenceMode>,
}

fn serve_server(config_path: &Path) -> Result<(), Failure> {
    let federation = start_federation(config_path)?;
    let server = federation.server();
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    for line in stdin.lock().lines() {
        let line = line.map_err(config_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<StdinQuestion>(&line).unwrap_or(StdinQuestion {
            text: line.clone(),
            options: BTreeMap::new(),
            mode: None,
        });
        let question = Question {
            text: parsed.text,
            options: parsed
                .options
                .into_iter()
                .map(|(l, t)| AnswerOption::new(l, t))
                .collect(),
        };
        let mode = parsed.mode.unwrap_or(server.config().inference_mode);
        let out = match server.handle_query_as(&question, mode) {
            Ok(record) => serde_json::to_value(&record).expect("record serializes"),
            Err(e) => serde_json::json!({"error": e.code(), "message": e.to_string()}),
        };
        writeln!(stdout, "{out}").map_err(config_err)?;
        stdout.flush().map_err(config_err)?;
    }
    Ok(())
}

fn bench(
    config_path: &Path,
    questions_path: &Path,
    mode: ModeArg,
    out: Option<&Path>,
    dataset: Option<&str>,
    unit: UnitArg,
) -> Result<(), Failure> {
    let questions = load_questions(questions_path).map_err(config_err)?;
    let dataset = dataset
        .map(str::to_string)
        .or_else(|| questions_path.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .unwrap_or_else(|| "questions".into());
    let modes: Vec<InferenceMode> = match mode {
        ModeArg::All => InferenceMode::ALL.to_vec(),
        ModeArg::Standalone => vec![InferenceMode::Standalone],
        ModeArg::Cascading => vec![InferenceMode::Cascading],
        ModeArg::Confidential => vec![InferenceMode::Confidential],
    };
    let federation = start_federation(config_path)?;
    let mut runs: Vec<BenchmarkRun> = Vec::new();
    for m in modes {
        let run = run_benchmark(federation.server(), &dataset, &questions, m).map_err(|e| match e {
            BenchError::Aborted { .. } => Failure::Abort(e.to_string()),
            BenchError::Empty => Failure::Config(e.to_string()),
        })?;
        runs.push(run);
    }
    let unit = match unit {
        UnitArg::Ms => TimeUnit::Milliseconds,
        UnitArg::S => TimeUnit::Seconds,
    };
    let report = Report::build(&runs, unit);
    let table = report.render();
    let _ = write!(io::stdout().lock(), "{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| config_err(format!("{}: {e}", dir.display())))?;
        let write = |name: &str, contents: String| {
            let p = dir.join(name);
            fs::write(&p, contents).map_err(|e| config_err(format!("{}: {e}", p.display())))
        };
        write("report.txt", table)?;
        write("report.json", report.to_json() + "\n")?;
        write(
            "runs.json",
            serde_json::to_string_pretty(&runs).expect("runs serialize") + "\n",
        )?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Keygen { id, out, register_in } => keygen(&id, &out, register_in.as_deref()),
        Command::Measure {
            manifest,
            init,
            allow_in,
        } => measure(&manifest, init.as_deref(), allow_in.as_deref()),
        Command::Ingest {
            silo,
            input,
            dim,
            no_normalize,
        } => ingest(&silo, &input, dim, !no_normalize),
        Command::ServeSilo { config } => serve_silo(&config),
        Command::ServeServer { config } => serve_server(&config),
        Command::Query {
            config,
            text,
            options,
            mode,
        } => query(&config, &text, &options, mode),
        Command::Bench {
            config,
            questions,
            mode,
            out,
            dataset,
            time_unit,
        } => bench(&config, &questions, mode, out.as_deref(), dataset.as_deref(), time_unit),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
