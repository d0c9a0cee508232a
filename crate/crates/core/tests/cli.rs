use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use agentguard::a2m::Client;
use agentguard::scenario::{self, RunOptions, ScenarioBundle};
use agentguard::AgentBasicInfo;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_agentguard"));
    c.env("RUST_LOG", "error");
    c
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
    }
}

#[test]
fn replay_passes_for_every_shipped_scenario() {
    for entry in std::fs::read_dir(scenarios_dir()).unwrap() {
        let dir = entry.unwrap().path();
        let d = dir.to_str().unwrap();
        let (code, out, err) = run(&["replay", d]);
        assert_eq!(code, 0, "{d}\n{out}\n{err}");
        assert!(out.contains(": PASS"));
        let (code, json, _) = run(&["replay", d, "--json", "--over-tcp"]);
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["passed"], true);
    }
}

#[test]
fn replay_mismatch_exits_1_and_names_the_divergence() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("agent-kill");
    copy_dir(&scenarios_dir().join("agent-kill"), &dir);
    let expected = std::fs::read_to_string(dir.join("expected.jsonl")).unwrap();
    std::fs::write(dir.join("expected.jsonl"), expected.replace("\"terminate\"", "\"resume\"")).unwrap();
    let (code, out, _) = run(&["replay", dir.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(out.contains("first divergence: decision #2: expected seq=3 resume via=rule, got seq=3 terminate via=rule"), "{out}");
}

#[test]
fn replay_parse_error_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("benign");
    copy_dir(&scenarios_dir().join("benign"), &dir);
    std::fs::write(dir.join("trace.jsonl"), "{\"timestamp\": 1, \"pid\": 2, \"kind\": \"teleport\"}\n").unwrap();
    let (code, _, err) = run(&["replay", dir.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("trace.jsonl"), "{err}");
    let (code, _, _) = run(&["replay", "/nonexistent/scenario"]);
    assert_eq!(code, 2);
}

#[test]
fn check_prints_canonical_renderings() {
    let dir = scenarios_dir().join("repeated-read");
    let (code, out, _) = run(&["check", "scenario", dir.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.contains("name = \"repeated-read\""));
    assert!(out.contains("file_open_read = true"));

    let (code, out, _) = run(&["check", "policy", dir.join("policy.toml").to_str().unwrap()]);
    assert_eq!(code, 0);
    let reparsed = agentguard::tracer::EnforcementPolicy::parse(&out, Path::new("x")).unwrap();
    assert_eq!(reparsed.render(), out);

    let rules = scenarios_dir().join("agent-kill/rules.toml");
    let (code, out, _) = run(&["check", "rules", rules.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.contains("allow-bash"));
}

struct ServeFixture {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    logs: PathBuf,
}

fn serve_fixture(listen: &str) -> ServeFixture {
    let tmp = tempfile::tempdir().unwrap();
    let src = scenarios_dir().join("benign");
    std::fs::copy(src.join("trace.jsonl"), tmp.path().join("trace.jsonl")).unwrap();
    std::fs::copy(src.join("stub.jsonl"), tmp.path().join("stub.jsonl")).unwrap();
    std::fs::write(tmp.path().join("policy.toml"), "max_enforced_process_level = 4\n").unwrap();
    let config = tmp.path().join("monitor.toml");
    std::fs::write(
        &config,
        format!(
            "listen_addr = \"{listen}\"\npolicy_file = \"policy.toml\"\nlog_dir = \"logs\"\ntrace_source = {{ replay = \"trace.jsonl\" }}\nauditor = {{ stub = \"stub.jsonl\" }}\n"
        ),
    )
    .unwrap();
    let logs = tmp.path().join("logs");
    ServeFixture { _tmp: tmp, config, logs }
}

#[test]
fn serve_missing_policy_exits_2_naming_the_path() {
    let f = serve_fixture("127.0.0.1:0");
    std::fs::remove_file(f.config.parent().unwrap().join("policy.toml")).unwrap();
    let (code, _, err) = run(&["serve", "--config", f.config.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("policy.toml"), "{err}");
}

struct KillOnDrop(std::process::Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_listen_flag_wins_and_sigterm_stops_cleanly() {
    // The config address is unusable, so binding only works if --listen wins.
    let f = serve_fixture("203.0.113.1:1");
    let child = bin()
        .args(["serve", "--config", f.config.to_str().unwrap(), "--listen", "127.0.0.1:0"])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut child = KillOnDrop(child);
    let mut stderr = BufReader::new(child.0.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect(&line).to_string();

    let mut c = Client::connect_tcp(&addr, "c0ffee", Duration::from_secs(5)).unwrap();
    c.connect(AgentBasicInfo {
        agent_process_id: 100,
        ..Default::default()
    })
    .unwrap();
    c.start_passive_tracing().unwrap();
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    let audit = loop {
        let found = std::fs::read_dir(&f.logs).ok().and_then(|d| {
            d.filter_map(Result::ok)
                .map(|e| e.path())
                .find(|p| p.to_string_lossy().ends_with(".audit.jsonl"))
        });
        if let Some(p) = found {
            if std::fs::read_to_string(&p).unwrap().lines().count() == 4 {
                break p;
            }
        }
        assert!(std::time::Instant::now() < deadline, "audit log not complete");
        std::thread::sleep(Duration::from_millis(20));
    };
    assert!(audit.file_name().unwrap().to_string_lossy().starts_with("c0ffee-"));
    drop(c);

    unsafe { libc::kill(child.0.id() as i32, libc::SIGTERM) };
    let status = child.0.wait().unwrap();
    assert_eq!(status.code(), Some(0));
}

#[test]
fn log_filters_and_formats() {
    let bundle = ScenarioBundle::load(&scenarios_dir().join("dependent-file-tamper")).unwrap();
    let out = scenario::run(&bundle, RunOptions::default()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("x.audit.jsonl");
    let text: String = out
        .records
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    std::fs::write(&file, text).unwrap();
    let f = file.to_str().unwrap();

    let (code, table, _) = run(&["log", f, "--filter", "verdict=terminate"]);
    assert_eq!(code, 0);
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().skip(1).all(|l| l.contains("terminate")));

    let (code, json, _) = run(&["log", f, "--filter", "verdict=terminate", "--filter", "pid=102", "--json"]);
    assert_eq!(code, 0);
    let v: Vec<serde_json::Value> = serde_json::from_str(&json).unwrap();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0]["decided_by"]["rule_id"], "builtin:protect-dependent-files");

    let (code, _, err) = run(&["log", f, "--filter", "colour=red"]);
    assert_eq!(code, 2);
    assert!(err.contains("colour"));
}
