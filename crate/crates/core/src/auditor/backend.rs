//! Model-based auditor backends.
//!
//! [`StubAuditor`] answers from a JSONL script, one entry per line, first
//! match wins, anything unmatched is denied:
//!
//! ```json
//! {"match": {"kind": "file_open", "path_glob": "/var/log/**", "mode": "read"}, "verdict": "resume", "verify_event": "task", "explanation": "log reading is the task"}
//! {"match": {"kind": "net_connect", "addr": "*.example.com", "port": 443}, "verdict": "resume", "verified_ops": [{"kind": "network", "host": "api.example.com", "port": 443, "direction": "outbound", "scope": "once"}]}
//! {"match": {"kind": "exec", "path_glob": "/usr/bin/slow"}, "error": "upstream timeout"}
//! ```
//!
//! `verify_event` adds the operations that make up the matched event itself
//! at the given scope. `latency_ms` advances the injected manual clock, which
//! is how scripted model latency is charged against audit budgets.
//! `summary_contains` matches against the task summary.

use std::sync::Arc;
use std::time::Duration;

use globset::GlobMatcher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cache::{Access, Scope, VerifiedOperation};
use super::chain::ChainOp;
use super::{AuditDecision, SecurityQuery};
use crate::clock::ManualClock;
use crate::model::Verdict;
use crate::tracer::{EventDetail, EventKind, FileMode};

pub const PROMPT_TEMPLATE: &str = include_str!("../../assets/prompt_v1.txt");
pub const PROMPT_VERSION: &str = "v1";
pub const DEFAULT_MODEL_TIMEOUT: Duration = Duration::from_secs(30);
pub const NO_ALLOWANCE: &str = "no allowance";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("model backend disabled")]
    Disabled,
    #[error("model request timed out")]
    Timeout,
    #[error("model request failed: {0}")]
    Transport(String),
    #[error("unparseable model response: {0}")]
    Parse(String),
    #[error("{0}")]
    Scripted(String),
}

pub trait ModelBackend: Send {
    fn query(&mut self, q: &SecurityQuery) -> Result<AuditDecision, BackendError>;

    fn name(&self) -> &'static str;
}

#[derive(Debug, Default)]
pub struct DisabledBackend;

impl ModelBackend for DisabledBackend {
    fn query(&mut self, _: &SecurityQuery) -> Result<AuditDecision, BackendError> {
        Err(BackendError::Disabled)
    }

    fn name(&self) -> &'static str {
        "disabled"
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_glob: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<FileMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_contains: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubEntry {
    #[serde(rename = "match", default)]
    pub pattern: StubMatch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub verified_ops: Vec<VerifiedOperation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_event: Option<Scope>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub explanation: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct StubScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
struct CompiledEntry {
    entry: StubEntry,
    kind: Option<EventKind>,
    path: Option<GlobMatcher>,
    addr: Option<GlobMatcher>,
}

impl CompiledEntry {
    fn compile(entry: StubEntry) -> Result<Self, String> {
        let kind = match entry.pattern.kind.as_deref() {
            None | Some("any") => None,
            Some(k) => Some(EventKind::parse(k).ok_or_else(|| format!("unknown event kind {k:?}"))?),
        };
        let glob = |pattern: &str, literal_separator: bool| {
            globset::GlobBuilder::new(pattern)
                .literal_separator(literal_separator)
                .build()
                .map(|g| g.compile_matcher())
        };
        let path = entry
            .pattern
            .path_glob
            .as_deref()
            .map(|p| glob(p, true))
            .transpose()
            .map_err(|e| format!("bad path_glob: {e}"))?;
        let addr = entry
            .pattern
            .addr
            .as_deref()
            .map(|p| glob(p, false))
            .transpose()
            .map_err(|e| format!("bad addr: {e}"))?;
        if entry.verdict.is_none() && entry.error.is_none() {
            return Err("entry needs a verdict or an error".into());
        }
        Ok(Self {
            entry,
            kind,
            path,
            addr,
        })
    }

    fn matches(&self, q: &SecurityQuery) -> bool {
        let e = &q.event;
        if self.kind.is_some_and(|k| k != e.kind()) {
            return false;
        }
        if let Some(path) = &self.path {
            let hit = match &e.detail {
                EventDetail::Exec { path: p, .. } => path.is_match(p),
                d => {
                    let paths = d.file_paths();
                    !paths.is_empty() && paths.iter().all(|p| path.is_match(p))
                }
            };
            if !hit {
                return false;
            }
        }
        if let Some(mode) = self.entry.pattern.mode {
            let access = match &e.detail {
                EventDetail::FileOpen { mode, .. } => Access::from(*mode),
                EventDetail::FileRemove { .. } | EventDetail::FileRename { .. } => Access::WRITE,
                _ => return false,
            };
            if !Access::from(mode).covers(access) {
                return false;
            }
        }
        if self.addr.is_some() || self.entry.pattern.port.is_some() {
            let Some(net) = e.detail.net() else {
                return false;
            };
            if self.entry.pattern.port.is_some_and(|p| p != net.port) {
                return false;
            }
            if let Some(addr) = &self.addr {
                let domain_hit = e.domain.as_deref().is_some_and(|d| addr.is_match(d));
                if !domain_hit && !addr.is_match(net.address.to_string()) {
                    return false;
                }
            }
        }
        if let Some(needle) = &self.entry.pattern.summary_contains {
            if !q.task_summary.contains(needle.as_str()) {
                return false;
            }
        }
        true
    }
}

pub fn parse_stub_script(text: &str) -> Result<Vec<StubEntry>, StubScriptError> {
    compile_stub_script(text).map(|v| v.into_iter().map(|c| c.entry).collect())
}

fn compile_stub_script(text: &str) -> Result<Vec<CompiledEntry>, StubScriptError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| StubScriptError {
            line: idx + 1,
            message,
        };
        let entry: StubEntry = serde_json::from_str(trimmed).map_err(|e| err(e.to_string()))?;
        out.push(CompiledEntry::compile(entry).map_err(err)?);
    }
    Ok(out)
}

/// Deterministic scripted auditor.
#[derive(Debug, Clone)]
pub struct StubAuditor {
    entries: Vec<CompiledEntry>,
    clock: Option<Arc<ManualClock>>,
    queries: u64,
}

impl StubAuditor {
    pub fn from_script(text: &str) -> Result<Self, StubScriptError> {
        Ok(Self {
            entries: compile_stub_script(text)?,
            clock: None,
            queries: 0,
        })
    }

    pub fn with_clock(mut self, clock: Arc<ManualClock>) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }
}

impl ModelBackend for StubAuditor {
    fn query(&mut self, q: &SecurityQuery) -> Result<AuditDecision, BackendError> {
        self.queries += 1;
        let Some((idx, hit)) = self.entries.iter().enumerate().find(|(_, c)| c.matches(q)) else {
            return Ok(AuditDecision {
                verdict: Verdict::Terminate,
                verified_ops: Vec::new(),
                explanation: NO_ALLOWANCE.into(),
            });
        };
        let entry = &hit.entry;
        if let (Some(clock), true) = (&self.clock, entry.latency_ms > 0) {
            clock.advance(Duration::from_millis(entry.latency_ms));
        }
        if let Some(error) = &entry.error {
            return Err(BackendError::Scripted(error.clone()));
        }
        let mut verified_ops = entry.verified_ops.clone();
        if let Some(scope) = entry.verify_event {
            verified_ops.extend(VerifiedOperation::for_event(&q.event, scope));
        }
        let verdict = entry.verdict.expect("compiled entries carry a verdict or an error");
        let explanation = if entry.explanation.is_empty() {
            format!("stub entry {} ({})", idx + 1, verdict.as_str())
        } else {
            entry.explanation.clone()
        };
        Ok(AuditDecision {
            verdict,
            verified_ops,
            explanation,
        })
    }

    fn name(&self) -> &'static str {
        "stub"
    }
}

fn render_event(q: &SecurityQuery) -> String {
    let e = &q.event;
    let mut value = serde_json::json!({
        "pid": e.pid,
        "kind": e.kind().as_str(),
    });
    let detail = serde_json::to_value(&e.detail).expect("event detail serializes");
    if let Some(d) = detail.get("detail") {
        value["detail"] = d.clone();
    }
    if let Some(domain) = &e.domain {
        value["domain"] = domain.clone().into();
    }
    serde_json::to_string_pretty(&value).expect("json value serializes")
}

fn render_op(op: &ChainOp) -> String {
    match op {
        ChainOp::File { path, access } => format!("file {access} {path}"),
        ChainOp::Network {
            host,
            port,
            direction,
        } => {
            let dir = serde_json::to_value(direction).expect("direction serializes");
            format!("network {} {host}:{port}", dir.as_str().unwrap_or("?"))
        }
        ChainOp::Exec { path } => format!("exec {path}"),
    }
}

fn render_trace(q: &SecurityQuery) -> String {
    let mut out = String::new();
    for (i, node) in q.chain.nodes.iter().enumerate() {
        let shell = if node.is_shell { " (shell)" } else { "" };
        out.push_str(&format!(
            "[{i}] pid {} level {} {}{shell}\n    argv: {}\n",
            node.pid,
            node.level,
            node.executable,
            node.argv.join(" ")
        ));
        if node.ops.is_empty() {
            out.push_str("    (no unverified operations)\n");
        }
        for op in &node.ops {
            out.push_str("    ");
            out.push_str(&render_op(op));
            out.push('\n');
        }
    }
    if q.chain.truncated {
        out.push_str("note: ancestors above the enforced level are omitted\n");
    }
    if q.chain.orphan {
        out.push_str("note: this process has no known path to the agent main process\n");
    }
    out
}

/// Fills the prompt template for `q`.
pub fn render_prompt(q: &SecurityQuery) -> String {
    PROMPT_TEMPLATE
        .replace("{{task_summary}}", &q.task_summary)
        .replace("{{event}}", &render_event(q))
        .replace("{{trace}}", render_trace(q).trim_end())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelReply {
    verdict: Verdict,
    #[serde(default)]
    verified_ops: Vec<VerifiedOperation>,
    explanation: String,
}

/// Parses a model reply. Text around the outermost JSON object is ignored.
pub fn parse_model_response(text: &str) -> Result<AuditDecision, BackendError> {
    let start = text.find('{').ok_or_else(|| BackendError::Parse("no JSON object".into()))?;
    let end = text.rfind('}').ok_or_else(|| BackendError::Parse("no JSON object".into()))?;
    if end < start {
        return Err(BackendError::Parse("no JSON object".into()));
    }
    let reply: ModelReply =
        serde_json::from_str(&text[start..=end]).map_err(|e| BackendError::Parse(e.to_string()))?;
    if reply.explanation.trim().is_empty() {
        return Err(BackendError::Parse("empty explanation".into()));
    }
    Ok(AuditDecision {
        verdict: reply.verdict,
        verified_ops: reply.verified_ops,
        explanation: reply.explanation,
    })
}

/// HTTP backend. Posts `{"template_version", "prompt"}` and expects the
/// reply described in the prompt template, either as the response body or
/// embedded in it.
pub struct RemoteAuditor {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteAuditor {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl ModelBackend for RemoteAuditor {
    fn query(&mut self, q: &SecurityQuery) -> Result<AuditDecision, BackendError> {
        let body = serde_json::json!({
            "template_version": PROMPT_VERSION,
            "prompt": render_prompt(q),
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Transport(t) if t.kind() == ureq::ErrorKind::Io => {
                let msg = t.to_string();
                if msg.contains("timed out") {
                    BackendError::Timeout
                } else {
                    BackendError::Transport(msg)
                }
            }
            other => BackendError::Transport(other.to_string()),
        })?;
        let text = resp
            .into_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        parse_model_response(&text)
    }

    fn name(&self) -> &'static str {
        "remote"
    }
}
