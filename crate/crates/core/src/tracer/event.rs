//! Trace event types and the JSONL replay format.
//!
//! One event per line:
//!
//! ```json
//! {"timestamp": 1200, "pid": 101, "kind": "exec", "detail": {"path": "/bin/cat", "argv": ["cat", "/tmp/x"]}}
//! ```
//!
//! `seq`, `epoch` and `enforcement` are assigned at ingest and must not
//! appear in replay files.

use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Fork,
    Exec,
    Kill,
    Exit,
    FileOpen,
    FileRemove,
    FileRename,
    NetConnect,
    NetListen,
    NetAccept,
    DnsResolve,
}

impl EventKind {
    pub const ALL: [EventKind; 11] = [
        EventKind::Fork,
        EventKind::Exec,
        EventKind::Kill,
        EventKind::Exit,
        EventKind::FileOpen,
        EventKind::FileRemove,
        EventKind::FileRename,
        EventKind::NetConnect,
        EventKind::NetListen,
        EventKind::NetAccept,
        EventKind::DnsResolve,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Fork => "fork",
            EventKind::Exec => "exec",
            EventKind::Kill => "kill",
            EventKind::Exit => "exit",
            EventKind::FileOpen => "file_open",
            EventKind::FileRemove => "file_remove",
            EventKind::FileRename => "file_rename",
            EventKind::NetConnect => "net_connect",
            EventKind::NetListen => "net_listen",
            EventKind::NetAccept => "net_accept",
            EventKind::DnsResolve => "dns_resolve",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileMode {
    Read,
    Write,
    ReadWrite,
}

impl FileMode {
    pub fn reads(self) -> bool {
        matches!(self, FileMode::Read | FileMode::ReadWrite)
    }

    pub fn writes(self) -> bool {
        matches!(self, FileMode::Write | FileMode::ReadWrite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AddrFamily {
    Inet,
    Inet6,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDetail {
    pub address: IpAddr,
    pub port: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<AddrFamily>,
}

impl NetDetail {
    pub fn family(&self) -> AddrFamily {
        self.family.unwrap_or(match self.address {
            IpAddr::V4(_) => AddrFamily::Inet,
            IpAddr::V6(_) => AddrFamily::Inet6,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum EventDetail {
    Fork {
        child_pid: u32,
    },
    Exec {
        path: String,
        #[serde(default)]
        argv: Vec<String>,
    },
    Kill {
        target_pid: u32,
        signal: i32,
    },
    Exit {
        status: i32,
    },
    FileOpen {
        path: String,
        mode: FileMode,
    },
    FileRemove {
        path: String,
    },
    FileRename {
        from: String,
        to: String,
    },
    NetConnect(NetDetail),
    NetListen(NetDetail),
    NetAccept(NetDetail),
    DnsResolve {
        domain: String,
        addresses: Vec<IpAddr>,
    },
}

impl EventDetail {
    pub fn kind(&self) -> EventKind {
        match self {
            EventDetail::Fork { .. } => EventKind::Fork,
            EventDetail::Exec { .. } => EventKind::Exec,
            EventDetail::Kill { .. } => EventKind::Kill,
            EventDetail::Exit { .. } => EventKind::Exit,
            EventDetail::FileOpen { .. } => EventKind::FileOpen,
            EventDetail::FileRemove { .. } => EventKind::FileRemove,
            EventDetail::FileRename { .. } => EventKind::FileRename,
            EventDetail::NetConnect(_) => EventKind::NetConnect,
            EventDetail::NetListen(_) => EventKind::NetListen,
            EventDetail::NetAccept(_) => EventKind::NetAccept,
            EventDetail::DnsResolve { .. } => EventKind::DnsResolve,
        }
    }

    /// File paths touched by this event, if it is a file event.
    pub fn file_paths(&self) -> Vec<&str> {
        match self {
            EventDetail::FileOpen { path, .. } | EventDetail::FileRemove { path } => vec![path],
            EventDetail::FileRename { from, to } => vec![from, to],
            _ => Vec::new(),
        }
    }

    pub fn net(&self) -> Option<&NetDetail> {
        match self {
            EventDetail::NetConnect(n) | EventDetail::NetListen(n) | EventDetail::NetAccept(n) => {
                Some(n)
            }
            _ => None,
        }
    }
}

/// An event as produced by a trace source, before ingest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    /// Monotonic clock reading in milliseconds.
    pub timestamp: u64,
    pub pid: u32,
    #[serde(flatten)]
    pub detail: EventDetail,
}

impl RawEvent {
    pub fn new(timestamp: u64, pid: u32, detail: EventDetail) -> Self {
        Self {
            timestamp,
            pid,
            detail,
        }
    }

    pub fn kind(&self) -> EventKind {
        self.detail.kind()
    }
}

/// An ingested event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub timestamp: u64,
    pub pid: u32,
    pub epoch: u64,
    #[serde(flatten)]
    pub detail: EventDetail,
    pub enforcement: bool,
    /// Domain that most recently resolved to the remote address, for
    /// network events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl TraceEvent {
    pub fn kind(&self) -> EventKind {
        self.detail.kind()
    }
}

#[derive(Debug, Error)]
pub enum TraceParseError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: replay events must not carry `{field}`")]
    ReservedField { line: usize, field: &'static str },
    #[error("line {line}: timestamp {ts} goes backwards (previous {prev})")]
    NonMonotonic { line: usize, ts: u64, prev: u64 },
}

const RESERVED: [&str; 3] = ["seq", "enforcement", "epoch"];

/// Parses one replay line (without the ordering check).
pub fn parse_trace_line(line: &str, line_no: usize) -> Result<RawEvent, TraceParseError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|source| TraceParseError::Json { line: line_no, source })?;
    if let Some(obj) = value.as_object() {
        if let Some(field) = RESERVED.iter().find(|f| obj.contains_key(**f)) {
            return Err(TraceParseError::ReservedField {
                line: line_no,
                field,
            });
        }
    }
    serde_json::from_value(value).map_err(|source| TraceParseError::Json { line: line_no, source })
}

/// Parses a JSONL replay file. Blank lines and lines starting with `#` are
/// skipped; timestamps must be non-decreasing.
pub fn parse_trace_jsonl(text: &str) -> Result<Vec<RawEvent>, TraceParseError> {
    let mut out: Vec<RawEvent> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let ev = parse_trace_line(trimmed, idx + 1)?;
        if let Some(prev) = out.last() {
            if ev.timestamp < prev.timestamp {
                return Err(TraceParseError::NonMonotonic {
                    line: idx + 1,
                    ts: ev.timestamp,
                    prev: prev.timestamp,
                });
            }
        }
        out.push(ev);
    }
    Ok(out)
}

pub fn render_trace_jsonl(events: &[RawEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str(&serde_json::to_string(ev).expect("event serializes"));
        out.push('\n');
    }
    out
}
