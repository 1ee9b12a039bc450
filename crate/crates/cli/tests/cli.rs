use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_fedrag");

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../core/tests/fixtures/corpora/{name}.jsonl"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

struct Silo(Child);

impl Drop for Silo {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts `serve-silo` on an ephemeral port and returns its address.
fn spawn_silo(dir: &Path, name: &str) -> (Silo, String) {
    std::fs::write(
        dir.join(format!("{name}.toml")),
        format!(
            "[silo]\nlisten = \"127.0.0.1:0\"\ndata_dir = \"data/{name}\"\nidentity_key = \"{name}.key\"\n\
             manifest = \"silo-manifest.json\"\nserver_policy = \"server-policy.json\"\n"
        ),
    )
    .unwrap();
    let mut child = Command::new(BIN)
        .current_dir(dir)
        .args(["serve-silo", "--config", &format!("{name}.toml")])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("silo listening on ")
        .unwrap_or_else(|| panic!("unexpected silo output {line:?}"))
        .to_string();
    (Silo(child), addr)
}

fn server_config(dir: &Path, clients: &[(&str, String)]) -> &'static str {
    let list: Vec<String> = clients
        .iter()
        .map(|(id, addr)| format!("{{ id = \"{id}\", addr = \"{addr}\" }}"))
        .collect();
    std::fs::write(
        dir.join("server.toml"),
        format!(
            "[server]\nidentity_key = \"server.key\"\nmanifest = \"server-manifest.json\"\npolicy = \"silo-policy.json\"\n\
             query_log = \"queries.jsonl\"\n\n[federation]\nresponse_deadline_ms = 3000\n\n\
             [transport]\nkind = \"tcp\"\nconnect_timeout_ms = 1000\nclients = [{}]\n\n\
             [inference]\nconfidential = {{ kind = \"mock\" }}\n",
            list.join(", ")
        ),
    )
    .unwrap();
    "server.toml"
}

#[test]
fn tcp_deployment_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["keygen", "--id", "server", "--out", "server.key", "--register-in", "server-policy.json"]);
    ok(dir, &["measure", "--init", "fedrag-server", "--manifest", "server-manifest.json", "--allow-in", "server-policy.json"]);
    ok(dir, &["measure", "--init", "fedrag-silo", "--manifest", "silo-manifest.json", "--allow-in", "silo-policy.json"]);
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = std::fs::metadata(dir.join("server.key")).unwrap().permissions().mode();
        assert_eq!(mode & 0o777, 0o600);
    }

    let mut silos = Vec::new();
    let mut clients = Vec::new();
    for name in ["pubmed", "textbooks"] {
        ok(dir, &["keygen", "--id", name, "--out", &format!("{name}.key"), "--register-in", "silo-policy.json"]);
        let report: serde_json::Value = serde_json::from_str(&ok(
            dir,
            &["ingest", "--silo", &format!("data/{name}"), "--input", corpus(name).to_str().unwrap()],
        ))
        .unwrap();
        assert_eq!(report["added"], 30);
        let (silo, addr) = spawn_silo(dir, name);
        silos.push(silo);
        clients.push((name, addr));
    }

    let config = server_config(dir, &clients);
    let record: serde_json::Value = serde_json::from_str(&ok(
        dir,
        &[
            "query", "--config", config, "--mode", "confidential",
            "--text", "Which enzyme is elevated in acute pancreatitis?",
            "--option", "A=Lipase", "--option", "B=Insulin",
        ],
    ))
    .unwrap();
    assert_eq!(record["responders"], serde_json::json!(["pubmed", "textbooks"]));
    assert_eq!(record["mode"], "confidential");
    assert!(record["answer_text"].as_str().unwrap().starts_with('A'));
    let log = std::fs::read_to_string(dir.join("queries.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    // With every silo gone the federation cannot form.
    drop(silos);
    let out = run(dir, &["query", "--config", config, "--text", "anything"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_configuration_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[transport]\nkind = \"carrier-pigeon\"\n").unwrap();
    let out = run(tmp.path(), &["query", "--config", "bad.toml", "--text", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(tmp.path(), &["query", "--config", "missing.toml", "--text", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn benchmark_abort_exits_with_4() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let corpora: Vec<String> = ["pubmed", "statpearls"]
        .iter()
        .map(|n| format!("{:?}", corpus(n).display().to_string()))
        .collect();
    // Every silo is denied, so no question reaches its quorum.
    std::fs::write(
        dir.join("sim.toml"),
        format!("[transport]\nkind = \"sim\"\ncorpora = [{}]\ndenied_clients = [0, 1]\n", corpora.join(", ")),
    )
    .unwrap();
    std::fs::write(
        dir.join("q.jsonl"),
        "{\"qid\":\"a\",\"question\":\"Is lipase raised in pancreatitis?\",\"options\":{\"A\":\"yes\",\"B\":\"no\"},\"gold\":\"A\"}\n",
    )
    .unwrap();
    let out = run(dir, &["bench", "--config", "sim.toml", "--questions", "q.jsonl"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
