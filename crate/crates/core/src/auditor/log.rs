//! Append-only audit log, one JSON record per audited event.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cache::Scope;
use super::chain::PrunedOp;
use super::{AuditDecision, Stage};
use crate::tracer::TraceEvent;

/// Which pipeline stage produced the decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "via", rename_all = "snake_case")]
pub enum DecidedBy {
    Rule { rule_id: String },
    Cache { scope: Scope },
    Model,
    FailClosed { reason: String },
}

impl DecidedBy {
    pub fn via(&self) -> &'static str {
        match self {
            DecidedBy::Rule { .. } => "rule",
            DecidedBy::Cache { .. } => "cache",
            DecidedBy::Model => "model",
            DecidedBy::FailClosed { .. } => "fail_closed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub epoch: u64,
    pub pid: u32,
    pub event: TraceEvent,
    pub stage_trace: Vec<Stage>,
    pub decision: AuditDecision,
    pub decided_by: DecidedBy,
    pub elapsed_ms: u64,
    pub cache_hit: bool,
    pub pruned_op_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pruned_ops: Vec<PrunedOp>,
    #[serde(default)]
    pub has_new_tool_use: bool,
    #[serde(default)]
    pub task_changed: bool,
}

#[derive(Debug, Error)]
#[error("audit log line {line}: {source}")]
pub struct AuditLogError {
    pub line: usize,
    #[source]
    pub source: serde_json::Error,
}

pub fn parse_audit_log(text: &str) -> Result<Vec<AuditRecord>, AuditLogError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| AuditLogError { line: i + 1, source })
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
    sink: Option<BufWriter<File>>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_file(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(file)),
        })
    }

    pub fn append(&mut self, record: AuditRecord) {
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&record).expect("audit record serializes");
            if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
                tracing::error!(error = %e, "audit log write failed");
            }
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }
}
