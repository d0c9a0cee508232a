//! Scenario bundles: recorded traces replayed through the full stack.
//!
//! A bundle is a directory:
//!
//! ```text
//! scenario.toml    manifest (optional; file names below are the defaults)
//! trace.jsonl      recorded events, one RawEvent per line
//! client.jsonl     agent-side script, one step per line
//! stub.jsonl       stub auditor script
//! expected.jsonl   expected decisions, {"seq", "verdict", "via"?} per line
//! ```
//!
//! The harness drives an in-process monitor (or a real socket with
//! `over_tcp`), pumps the replayed trace only when the script says
//! `advance`, and compares the audit log with the expected decisions. All
//! time is simulated, so the report is byte-identical across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::a2m::{Client, ClientError, Hello, Transport};
use crate::auditor::backend::parse_stub_script;
use crate::auditor::rules::{parse_rules, render_rules, Rule};
use crate::auditor::{AuditRecord, AuditStats, DecidedBy};
use crate::clock::{ManualClock, SharedClock};
use crate::model::{Action, AgentBasicInfo, Message, Role, Verdict};
use crate::monitor::pipeline::{BackendSpec, SessionEnv, SessionSlot};
use crate::monitor::server::{PumpMode, Server};
use crate::monitor::session::{lock, ServerSession};
use crate::monitor::LoopbackTransport;
use crate::tracer::event::{parse_trace_jsonl, render_trace_jsonl};
use crate::tracer::{EnforcementPolicy, RawEvent, TraceCounters, TraceEvent};
use crate::auditor::PathCanon;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Stub,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default = "default_trace")]
    pub trace: PathBuf,
    #[serde(default = "default_client")]
    pub client: PathBuf,
    #[serde(default = "default_stub")]
    pub stub: PathBuf,
    #[serde(default = "default_expected")]
    pub expected: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
    #[serde(default)]
    pub backend: BackendKind,
    /// Exact values for report counters, by name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub expect: BTreeMap<String, u64>,
}

fn default_trace() -> PathBuf {
    "trace.jsonl".into()
}
fn default_client() -> PathBuf {
    "client.jsonl".into()
}
fn default_stub() -> PathBuf {
    "stub.jsonl".into()
}
fn default_expected() -> PathBuf {
    "expected.jsonl".into()
}

impl Manifest {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: String::new(),
            trace: default_trace(),
            client: default_client(),
            stub: default_stub(),
            expected: default_expected(),
            policy: None,
            rules: None,
            backend: BackendKind::Stub,
            expect: BTreeMap::new(),
        }
    }
}

/// A chat message in a client script; the harness assigns `seq`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientStep {
    Connect {
        agent: AgentBasicInfo,
    },
    StartPassiveTracing,
    SendNewToolUse {
        #[serde(default)]
        messages: Vec<ScriptMessage>,
        action: Action,
    },
    /// Deliver and audit every trace event with `timestamp <= until`.
    Advance {
        until: u64,
    },
    GetEnforcementInfo {
        expect_alert: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expect_contains: Option<String>,
    },
    /// Drop the connection; tracing carries on in log-only mode.
    Disconnect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Via {
    Rule,
    Cache,
    Model,
    FailClosed,
}

impl Via {
    pub fn as_str(self) -> &'static str {
        match self {
            Via::Rule => "rule",
            Via::Cache => "cache",
            Via::Model => "model",
            Via::FailClosed => "fail_closed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedDecision {
    /// Ingest sequence number of the audited event.
    pub seq: u64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via: Option<Via>,
}

#[derive(Debug, Clone)]
pub struct ScenarioBundle {
    pub manifest: Manifest,
    pub trace: Vec<RawEvent>,
    pub client: Vec<ClientStep>,
    /// Stub script text.
    pub stub: String,
    /// `None` skips the comparison.
    pub expected: Option<Vec<ExpectedDecision>>,
    pub policy: EnforcementPolicy,
    pub rules: Vec<Rule>,
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>, ScenarioError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ScenarioError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn parse_client_script(text: &str) -> Result<Vec<ClientStep>, ScenarioError> {
    parse_jsonl(text, Path::new("client.jsonl"))
}

pub fn parse_expected(text: &str) -> Result<Vec<ExpectedDecision>, ScenarioError> {
    parse_jsonl(text, Path::new("expected.jsonl"))
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Counter names accepted in a manifest's `[expect]` table.
pub const COUNTER_NAMES: [&str; 18] = [
    "events_total",
    "events_ignored",
    "events_observed",
    "events_enforcement",
    "fencing_violations",
    "audits",
    "rule_hits",
    "cache_hits",
    "model_queries",
    "fail_closed",
    "pruned_ops",
    "flushes",
    "resumes",
    "terminations",
    "alerts_delivered",
    "dropped_decisions",
    "killed_exits",
    "deenforced_pids",
];

impl ScenarioBundle {
    pub fn load(dir: &Path) -> Result<Self, ScenarioError> {
        let manifest_path = dir.join("scenario.toml");
        let manifest = if manifest_path.exists() {
            toml::from_str(&read(&manifest_path)?).map_err(|e| ScenarioError::Parse {
                path: manifest_path.clone(),
                message: e.to_string(),
            })?
        } else {
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("scenario")
                .to_string();
            Manifest::named(name)
        };

        let trace_path = dir.join(&manifest.trace);
        let trace = parse_trace_jsonl(&read(&trace_path)?).map_err(|e| ScenarioError::Parse {
            path: trace_path.clone(),
            message: e.to_string(),
        })?;
        let client_path = dir.join(&manifest.client);
        let client = parse_jsonl(&read(&client_path)?, &client_path)?;
        let stub_path = dir.join(&manifest.stub);
        let stub = match (manifest.backend, stub_path.exists()) {
            (BackendKind::Disabled, false) => String::new(),
            _ => read(&stub_path)?,
        };
        parse_stub_script(&stub).map_err(|e| ScenarioError::Parse {
            path: stub_path.clone(),
            message: e.to_string(),
        })?;
        let expected_path = dir.join(&manifest.expected);
        let expected = parse_jsonl(&read(&expected_path)?, &expected_path)?;
        let policy = match &manifest.policy {
            Some(p) => {
                let path = dir.join(p);
                EnforcementPolicy::parse(&read(&path)?, &path).map_err(|e| ScenarioError::Parse {
                    path,
                    message: e.to_string(),
                })?
            }
            None => EnforcementPolicy::default(),
        };
        let rules = match &manifest.rules {
            Some(p) => {
                let path = dir.join(p);
                parse_rules(&read(&path)?).map_err(|e| ScenarioError::Parse {
                    path,
                    message: e.to_string(),
                })?
            }
            None => Vec::new(),
        };
        let bundle = Self {
            manifest,
            trace,
            client,
            stub,
            expected: Some(expected),
            policy,
            rules,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if let Some(bad) = self.manifest.expect.keys().find(|k| !COUNTER_NAMES.contains(&k.as_str())) {
            return Err(ScenarioError::Invalid(format!("unknown counter {bad:?} in [expect]")));
        }
        if let Some(expected) = &self.expected {
            // Every recorded event plus at most one synthesized exit per pid.
            let pids: std::collections::BTreeSet<u32> = self.trace.iter().map(|e| e.pid).collect();
            let max = (self.trace.len() + pids.len()) as u64;
            if let Some(e) = expected.iter().find(|e| e.seq == 0 || e.seq > max) {
                return Err(ScenarioError::Invalid(format!(
                    "expected decision for seq {} but the trace can yield at most {max} events",
                    e.seq
                )));
            }
            if expected.windows(2).any(|w| w[0].seq >= w[1].seq) {
                return Err(ScenarioError::Invalid("expected decisions must be in increasing seq order".into()));
            }
        }
        match self.client.first() {
            Some(ClientStep::Connect { .. }) => {}
            _ => return Err(ScenarioError::Invalid("client script must start with connect".into())),
        }
        Ok(())
    }

    /// Canonical rendering used by `check scenario`.
    pub fn render(&self) -> String {
        let mut out = toml::to_string(&self.manifest).expect("manifest serializes");
        let _ = writeln!(out, "\n# policy");
        out.push_str(&self.policy.render());
        if !self.rules.is_empty() {
            let _ = writeln!(out, "\n# rules");
            out.push_str(&render_rules(&self.rules));
        }
        let _ = writeln!(out, "\n# trace ({} events)", self.trace.len());
        out.push_str(&render_trace_jsonl(&self.trace));
        let _ = writeln!(out, "\n# client ({} steps)", self.client.len());
        for step in &self.client {
            let _ = writeln!(out, "{}", serde_json::to_string(step).expect("step serializes"));
        }
        if let Some(expected) = &self.expected {
            let _ = writeln!(out, "\n# expected ({} decisions)", expected.len());
            for e in expected {
                let _ = writeln!(out, "{}", serde_json::to_string(e).expect("decision serializes"));
            }
        }
        out
    }

    fn env(&self, clock: &Arc<ManualClock>) -> SessionEnv {
        SessionEnv {
            policy: self.policy.clone(),
            rules: self.rules.clone(),
            backend: match self.manifest.backend {
                BackendKind::Stub => BackendSpec::Stub(self.stub.clone()),
                BackendKind::Disabled => BackendSpec::Disabled,
            },
            trace: self.trace.clone(),
            clock: clock.clone() as SharedClock,
            manual_clock: Some(clock.clone()),
            log_dir: None,
            canon: PathCanon::default(),
        }
    }

    fn nonce(&self) -> String {
        let digest = Sha256::digest(self.manifest.name.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionLine {
    pub seq: u64,
    pub pid: u32,
    pub epoch: u64,
    pub kind: String,
    pub verdict: Verdict,
    pub via: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub quiescent: bool,
    pub decisions: Vec<DecisionLine>,
    pub counters: BTreeMap<String, u64>,
}

impl ScenarioReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {}: {}", self.name, if self.passed { "PASS" } else { "FAIL" });
        if let Some(f) = &self.failure {
            let _ = writeln!(out, "  first divergence: {f}");
        }
        let _ = writeln!(out, "  quiescent: {}", self.quiescent);
        let _ = writeln!(out, "  decisions:");
        for d in &self.decisions {
            let _ = write!(
                out,
                "    seq={:<4} pid={:<6} epoch={:<3} {:<12} {:<9} via={}",
                d.seq,
                d.pid,
                d.epoch,
                d.kind,
                d.verdict.as_str(),
                d.via
            );
            if let Some(detail) = &d.detail {
                let _ = write!(out, " ({detail})");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "  counters:");
        for (k, v) in &self.counters {
            let _ = writeln!(out, "    {k:<20} {v}");
        }
        out
    }

    pub fn render_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub report: ScenarioReport,
    pub records: Vec<AuditRecord>,
    pub counters: TraceCounters,
    pub stats: AuditStats,
    /// Everything the tracer logged, observed and enforcement alike.
    pub events: Vec<TraceEvent>,
    /// Process level of every pid the tracer saw.
    pub levels: BTreeMap<u32, u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub over_tcp: bool,
}

/// Where the harness sends its requests.
enum Link {
    Loopback(Client<LoopbackTransport>),
    Tcp(Client<crate::a2m::TcpTransport>),
}

impl Link {
    fn with<R>(&mut self, f: impl FnOnce(&mut dyn Caller) -> R) -> R {
        match self {
            Link::Loopback(c) => f(c),
            Link::Tcp(c) => f(c),
        }
    }
}

trait Caller {
    fn connect(&mut self, info: AgentBasicInfo) -> Result<crate::a2m::ServerResponse, ClientError>;
    fn start(&mut self) -> Result<crate::a2m::ServerResponse, ClientError>;
    fn notify(&mut self, msgs: Vec<Message>, action: Action) -> Result<crate::a2m::ServerResponse, ClientError>;
    fn info(&mut self) -> Result<crate::a2m::ServerResponse, ClientError>;
}

impl<T: Transport> Caller for Client<T> {
    fn connect(&mut self, info: AgentBasicInfo) -> Result<crate::a2m::ServerResponse, ClientError> {
        Client::connect(self, info)
    }
    fn start(&mut self) -> Result<crate::a2m::ServerResponse, ClientError> {
        self.start_passive_tracing()
    }
    fn notify(&mut self, msgs: Vec<Message>, action: Action) -> Result<crate::a2m::ServerResponse, ClientError> {
        self.send_new_tool_use(msgs, action)
    }
    fn info(&mut self) -> Result<crate::a2m::ServerResponse, ClientError> {
        self.get_enforcement_info()
    }
}

/// Replays `bundle` through the full stack.
pub fn run(bundle: &ScenarioBundle, opts: RunOptions) -> Result<ScenarioOutcome, ScenarioError> {
    bundle.validate()?;
    let clock = ManualClock::shared();
    let env = Arc::new(bundle.env(&clock));
    let nonce = bundle.nonce();
    let hello_timeout = Duration::from_secs(5);

    let mut server = None;
    let (mut link, slot, state) = if opts.over_tcp {
        let srv = Server::bind("127.0.0.1:0", env, hello_timeout, clock.clone(), PumpMode::Manual)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?
            .spawn();
        let client = Client::connect_tcp(&srv.addr.to_string(), &nonce, hello_timeout)
            .map_err(|e| ScenarioError::Invalid(format!("cannot reach in-process server: {e}")))?;
        let handle = srv
            .sessions()
            .into_iter()
            .next()
            .ok_or_else(|| ScenarioError::Invalid("server registered no session".into()))?;
        server = Some(srv);
        (Link::Tcp(client), handle.slot, handle.state)
    } else {
        let slot = SessionSlot::new(env);
        let session = ServerSession::new(slot.clone(), clock.clone(), hello_timeout);
        let state = session.state().clone();
        let client = Client::handshake(LoopbackTransport::new(session), Hello::new(nonce.clone()))
            .map_err(|e| ScenarioError::Invalid(format!("loopback handshake: {e}")))?;
        (Link::Loopback(client), slot, state)
    };

    let mut failure: Option<String> = None;
    let mut next_seq = 0u64;
    let mut connected = true;
    for (i, step) in bundle.client.iter().enumerate() {
        let fail = |what: String| format!("client step {} ({}): {what}", i + 1, step_name(step));
        let result: Result<(), String> = match step {
            ClientStep::Connect { agent } => link.with(|c| c.connect(agent.clone())).map(drop).map_err(|e| e.to_string()),
            ClientStep::StartPassiveTracing => link.with(|c| c.start()).map(drop).map_err(|e| e.to_string()),
            ClientStep::SendNewToolUse { messages, action } => {
                let msgs = messages
                    .iter()
                    .map(|m| {
                        next_seq += 1;
                        Message::new(m.role, m.content.clone(), next_seq - 1)
                    })
                    .collect();
                link.with(|c| c.notify(msgs, action.clone())).map(drop).map_err(|e| e.to_string())
            }
            ClientStep::Advance { until } => {
                slot.with_pipeline(|p| p.pump(Some(*until)));
                Ok(())
            }
            ClientStep::GetEnforcementInfo {
                expect_alert,
                expect_contains,
            } => match link.with(|c| c.info()) {
                Err(e) => Err(e.to_string()),
                Ok(resp) => {
                    let alert = resp.payload.and_then(|p| p.alert_text);
                    match (&alert, expect_alert) {
                        (Some(_), false) => Err(format!("unexpected alert {alert:?}")),
                        (None, true) => Err("expected an alert, got none".into()),
                        (Some(text), true) => match expect_contains {
                            Some(needle) if !text.contains(needle.as_str()) => {
                                Err(format!("alert {text:?} does not contain {needle:?}"))
                            }
                            _ => Ok(()),
                        },
                        (None, false) => Ok(()),
                    }
                }
            },
            ClientStep::Disconnect => {
                disconnect(&mut link, &state);
                connected = false;
                Ok(())
            }
        };
        if let Err(e) = result {
            failure = Some(fail(e));
            break;
        }
        if !connected {
            // Remaining steps can only be advances.
            if let Some(bad) = bundle.client[i + 1..].iter().find(|s| !matches!(s, ClientStep::Advance { .. })) {
                failure = Some(format!("{} after disconnect", step_name(bad)));
            }
        }
    }

    let quiescent_before_close = slot.with_pipeline(|p| {
        p.pump(None);
        p.is_quiescent()
    });
    if connected {
        disconnect(&mut link, &state);
    }
    drop(link);
    let outcome = slot.with_pipeline(|p| {
        p.pump(None);
        let quiescent = quiescent_before_close.unwrap_or(true) && p.is_quiescent();
        let records = p.records().to_vec();
        let counters = p.counters();
        let stats = p.stats();
        let alerts = lock(&state).alerts_delivered;
        let mut c = BTreeMap::new();
        c.insert("events_total".to_string(), counters.total);
        c.insert("events_ignored".to_string(), counters.ignored);
        c.insert("events_observed".to_string(), counters.observed);
        c.insert("events_enforcement".to_string(), counters.enforcement);
        c.insert("fencing_violations".to_string(), counters.fencing_violations);
        c.insert("audits".to_string(), stats.audits);
        c.insert("rule_hits".to_string(), stats.rule_hits);
        c.insert("cache_hits".to_string(), stats.cache_hits);
        c.insert("model_queries".to_string(), stats.model_queries);
        c.insert("fail_closed".to_string(), stats.fail_closed);
        c.insert("pruned_ops".to_string(), stats.pruned_ops);
        c.insert("flushes".to_string(), stats.flushes);
        let count = |v: Verdict| records.iter().filter(|r| r.decision.verdict == v).count() as u64;
        c.insert("resumes".to_string(), count(Verdict::Resume));
        c.insert("terminations".to_string(), count(Verdict::Terminate));
        c.insert("alerts_delivered".to_string(), alerts);
        c.insert("dropped_decisions".to_string(), p.dropped_decisions());
        let synthesized = p
            .tracer()
            .collector()
            .events()
            .iter()
            .filter(|e| matches!(e.detail, crate::tracer::EventDetail::Exit { status } if status == crate::tracer::source::KILLED_EXIT_STATUS))
            .count() as u64;
        c.insert("killed_exits".to_string(), synthesized);
        let budget = p.tracer().policy().audit_time_budget();
        let deenforced = p.tracer().processes().filter(|r| r.audit_time_spent > budget).count() as u64;
        c.insert("deenforced_pids".to_string(), deenforced);
        let levels = p.tracer().processes().map(|r| (r.pid, r.level)).collect();
        (quiescent, records, counters, stats, c, p.tracer().collector().events().to_vec(), levels)
    });
    if let Some(srv) = server {
        srv.stop();
    }
    let (quiescent, records, counters, stats, counter_map, events, levels) = outcome.unwrap_or_else(|| {
        (true, Vec::new(), TraceCounters::default(), AuditStats::default(), BTreeMap::new(), Vec::new(), BTreeMap::new())
    });

    if failure.is_none() && !quiescent {
        failure = Some("replay ended with a suspended process or an unaudited event".into());
    }
    if failure.is_none() {
        if let Some(expected) = &bundle.expected {
            failure = compare(expected, &records);
        }
    }
    if failure.is_none() {
        for (name, want) in &bundle.manifest.expect {
            let got = counter_map.get(name).copied().unwrap_or(0);
            if got != *want {
                failure = Some(format!("counter {name}: expected {want}, got {got}"));
                break;
            }
        }
    }

    let decisions = records.iter().map(decision_line).collect();
    let report = ScenarioReport {
        name: bundle.manifest.name.clone(),
        passed: failure.is_none(),
        failure,
        quiescent,
        decisions,
        counters: counter_map,
    };
    Ok(ScenarioOutcome {
        report,
        records,
        counters,
        stats,
        events,
        levels,
    })
}

fn disconnect(link: &mut Link, state: &crate::monitor::SharedState) {
    match link {
        Link::Loopback(c) => c.transport_mut().session_mut().disconnected(),
        Link::Tcp(c) => {
            let _ = c.transport_mut().shutdown();
            // The server notices the close on its own thread.
            let deadline = Instant::now() + Duration::from_secs(10);
            while !lock(state).closed && Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(2));
            }
        }
    }
}

fn step_name(step: &ClientStep) -> &'static str {
    match step {
        ClientStep::Connect { .. } => "connect",
        ClientStep::StartPassiveTracing => "start_passive_tracing",
        ClientStep::SendNewToolUse { .. } => "send_new_tool_use",
        ClientStep::Advance { .. } => "advance",
        ClientStep::GetEnforcementInfo { .. } => "get_enforcement_info",
        ClientStep::Disconnect => "disconnect",
    }
}

fn via_of(d: &DecidedBy) -> Via {
    match d {
        DecidedBy::Rule { .. } => Via::Rule,
        DecidedBy::Cache { .. } => Via::Cache,
        DecidedBy::Model => Via::Model,
        DecidedBy::FailClosed { .. } => Via::FailClosed,
    }
}

fn decision_line(r: &AuditRecord) -> DecisionLine {
    let detail = match &r.decided_by {
        DecidedBy::Rule { rule_id } => Some(rule_id.clone()),
        DecidedBy::Cache { scope } => Some(format!("{scope} scope")),
        DecidedBy::FailClosed { reason } => Some(reason.clone()),
        DecidedBy::Model => None,
    };
    DecisionLine {
        seq: r.seq,
        pid: r.pid,
        epoch: r.epoch,
        kind: r.event.kind().as_str().to_string(),
        verdict: r.decision.verdict,
        via: r.decided_by.via().to_string(),
        detail,
    }
}

/// First difference between the expected and actual decision sequences.
pub fn compare(expected: &[ExpectedDecision], records: &[AuditRecord]) -> Option<String> {
    for (i, want) in expected.iter().enumerate() {
        let Some(got) = records.get(i) else {
            return Some(format!(
                "decision #{}: expected seq={} {}, but only {} decisions were made",
                i + 1,
                want.seq,
                want.verdict.as_str(),
                records.len()
            ));
        };
        let got_via = via_of(&got.decided_by);
        if got.seq != want.seq || got.decision.verdict != want.verdict || want.via.is_some_and(|v| v != got_via) {
            let want_via = want.via.map(|v| format!(" via={}", v.as_str())).unwrap_or_default();
            return Some(format!(
                "decision #{}: expected seq={} {}{want_via}, got seq={} {} via={}",
                i + 1,
                want.seq,
                want.verdict.as_str(),
                got.seq,
                got.decision.verdict.as_str(),
                got_via.as_str()
            ));
        }
    }
    records.get(expected.len()).map(|extra| {
        format!(
            "decision #{}: unexpected extra decision seq={} {} via={}",
            expected.len() + 1,
            extra.seq,
            extra.decision.verdict.as_str(),
            extra.decided_by.via()
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracer::{EventDetail, FileMode};
    use serde_json::json;

    fn open(ts: u64, path: &str) -> RawEvent {
        RawEvent::new(
            ts,
            10,
            EventDetail::FileOpen {
                path: path.into(),
                mode: FileMode::Write,
            },
        )
    }

    fn bundle() -> ScenarioBundle {
        let client = vec![
            ClientStep::Connect {
                agent: AgentBasicInfo {
                    agent_process_id: 10,
                    ..Default::default()
                },
            },
            ClientStep::StartPassiveTracing,
            ClientStep::SendNewToolUse {
                messages: vec![ScriptMessage {
                    role: Role::User,
                    content: "write the report to /tmp".into(),
                }],
                action: Action::tool_use("bash", json!({"command": "echo > /tmp/r"})),
            },
            ClientStep::Advance { until: 100 },
            ClientStep::GetEnforcementInfo {
                expect_alert: true,
                expect_contains: Some("no allowance".into()),
            },
            ClientStep::GetEnforcementInfo {
                expect_alert: false,
                expect_contains: None,
            },
        ];
        ScenarioBundle {
            manifest: Manifest::named("unit"),
            trace: vec![open(10, "/tmp/r"), open(20, "/etc/passwd")],
            client,
            stub: r#"{"match": {"kind": "file_open", "path_glob": "/tmp/**"}, "verdict": "resume", "explanation": "report"}"#.into(),
            expected: Some(vec![
                ExpectedDecision {
                    seq: 1,
                    verdict: Verdict::Resume,
                    via: Some(Via::Model),
                },
                ExpectedDecision {
                    seq: 2,
                    verdict: Verdict::Terminate,
                    via: None,
                },
            ]),
            policy: EnforcementPolicy::default(),
            rules: Vec::new(),
        }
    }

    #[test]
    fn loopback_and_tcp_agree() {
        let b = bundle();
        let a = run(&b, RunOptions::default()).unwrap();
        assert!(a.report.passed, "{}", a.report.render_text());
        let t = run(&b, RunOptions { over_tcp: true }).unwrap();
        assert_eq!(a.report, t.report);
        assert_eq!(a.report.counters["alerts_delivered"], 1);
    }

    #[test]
    fn divergence_is_reported() {
        let mut b = bundle();
        b.expected.as_mut().unwrap()[1].verdict = Verdict::Resume;
        let out = run(&b, RunOptions::default()).unwrap();
        assert!(!out.report.passed);
        assert!(out.report.failure.unwrap().starts_with("decision #2"));

        let mut b = bundle();
        b.expected.as_mut().unwrap().pop();
        let out = run(&b, RunOptions::default()).unwrap();
        assert!(out.report.failure.unwrap().contains("unexpected extra"));
    }

    #[test]
    fn counters_and_validation() {
        let mut b = bundle();
        b.manifest.expect.insert("model_queries".into(), 3);
        let out = run(&b, RunOptions::default()).unwrap();
        assert_eq!(out.report.failure.unwrap(), "counter model_queries: expected 3, got 2");

        let mut b = bundle();
        b.manifest.expect.insert("bogus".into(), 1);
        assert!(matches!(b.validate(), Err(ScenarioError::Invalid(_))));
        let mut b = bundle();
        b.expected.as_mut().unwrap()[1].seq = 9;
        assert!(b.validate().is_err());
    }

    #[test]
    fn client_expectation_failure_stops_the_script() {
        let mut b = bundle();
        b.client[4] = ClientStep::GetEnforcementInfo {
            expect_alert: false,
            expect_contains: None,
        };
        let out = run(&b, RunOptions::default()).unwrap();
        let f = out.report.failure.unwrap();
        assert!(f.starts_with("client step 5 (get_enforcement_info)"), "{f}");
    }

    #[test]
    fn script_lines_parse() {
        let text = r#"
{"op": "connect", "agent": {"agent_process_id": 4, "dependent_files": ["/a"]}}
{"op": "start_passive_tracing"}
# comment
{"op": "send_new_tool_use", "messages": [{"role": "user", "content": "x"}], "action": {"kind": "tool_use", "tool_name": "bash"}}
{"op": "advance", "until": 5}
{"op": "get_enforcement_info", "expect_alert": false}
{"op": "disconnect"}
"#;
        assert_eq!(parse_client_script(text).unwrap().len(), 6);
        assert!(parse_client_script(r#"{"op": "fly"}"#).is_err());
        assert!(parse_expected(r#"{"seq": 1, "verdict": "maybe"}"#).is_err());
    }
}
