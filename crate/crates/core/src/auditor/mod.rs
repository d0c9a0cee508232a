//! Audit pipeline.
//!
//! Each enforcement event runs through: rule screen, task summarization
//! when new messages arrived, cache flush on a task change, cache lookup,
//! dependent trace extraction, model query, cache insert, recording of the
//! last enforcement information, and audit-time accounting. A rule verdict
//! or a cache hit ends the pipeline early.

pub mod backend;
pub mod cache;
pub mod chain;
pub mod log;
pub mod rules;
pub mod summarize;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::model::{EnforcementOutcome, Message, TaskContext, Verdict};
use crate::tracer::{TraceEvent, Tracer};

pub use backend::{BackendError, DisabledBackend, ModelBackend, RemoteAuditor, StubAuditor};
pub use cache::{CacheLookup, PathCanon, Permission, Scope, SecurityQueryCache, VerifiedOperation};
pub use chain::{ChainNode, ChainOp, ProcessChain, PrunedOp};
pub use log::{AuditLog, AuditRecord, DecidedBy};
pub use rules::{Rule, RuleContext, RuleOutcome, RuleSet};
pub use summarize::{StubSummarizer, Summarizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Rule,
    Summarize,
    Flush,
    Cache,
    Extract,
    Model,
    CacheInsert,
    Record,
    Accumulate,
}

impl Stage {
    /// Pipeline order.
    pub const ORDER: [Stage; 9] = [
        Stage::Rule,
        Stage::Summarize,
        Stage::Flush,
        Stage::Cache,
        Stage::Extract,
        Stage::Model,
        Stage::CacheInsert,
        Stage::Record,
        Stage::Accumulate,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("stage serializes");
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityQuery {
    pub task_summary: String,
    pub event: TraceEvent,
    pub chain: ProcessChain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditDecision {
    pub verdict: Verdict,
    #[serde(default)]
    pub verified_ops: Vec<VerifiedOperation>,
    pub explanation: String,
}

impl AuditDecision {
    fn resume(explanation: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::Resume,
            verified_ops: Vec::new(),
            explanation: explanation.into(),
        }
    }

    fn terminate(explanation: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::Terminate,
            verified_ops: Vec::new(),
            explanation: explanation.into(),
        }
    }

    pub fn to_outcome(&self) -> EnforcementOutcome {
        match self.verdict {
            Verdict::Resume => EnforcementOutcome::resume(&self.explanation),
            Verdict::Terminate => EnforcementOutcome::terminate(&self.explanation),
        }
    }
}

/// Chat messages that arrived since the last summarization.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditInput {
    pub msgs: Vec<Message>,
    pub has_new_tool_use: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditStats {
    pub audits: u64,
    pub rule_hits: u64,
    pub cache_hits: u64,
    pub model_queries: u64,
    pub fail_closed: u64,
    pub pruned_ops: u64,
    pub flushes: u64,
}

pub struct Auditor {
    rules: RuleSet,
    cache: SecurityQueryCache,
    summarizer: Box<dyn Summarizer>,
    backend: Box<dyn ModelBackend>,
    clock: SharedClock,
    ctx: TaskContext,
    last_info: Option<EnforcementOutcome>,
    stats: AuditStats,
}

impl Auditor {
    pub fn new(
        rules: RuleSet,
        cache: SecurityQueryCache,
        summarizer: Box<dyn Summarizer>,
        backend: Box<dyn ModelBackend>,
        clock: SharedClock,
    ) -> Self {
        Self {
            rules,
            cache,
            summarizer,
            backend,
            clock,
            ctx: TaskContext::default(),
            last_info: None,
            stats: AuditStats::default(),
        }
    }

    pub fn cache(&self) -> &SecurityQueryCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut SecurityQueryCache {
        &mut self.cache
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub fn task_context(&self) -> &TaskContext {
        &self.ctx
    }

    pub fn stats(&self) -> AuditStats {
        self.stats
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    /// Outcome of the most recent model-path audit.
    pub fn last_enforcement_info(&self) -> Option<&EnforcementOutcome> {
        self.last_info.as_ref()
    }

    /// Audits one enforcement event. `input` is drained when summarization
    /// runs and left alone when a rule decides first.
    pub fn audit(&mut self, e: &TraceEvent, tracer: &mut Tracer, input: &mut AuditInput) -> AuditRecord {
        let start = self.clock.now();
        self.stats.audits += 1;
        let mut stages = vec![Stage::Rule];
        let has_new_tool_use = input.has_new_tool_use;

        let ancestry = tracer.ancestry(e.pid);
        let ctx = RuleContext {
            agent_pid: tracer.agent_pid(),
            ancestors: ancestry.get(1..).unwrap_or(&[]),
        };
        let rule_decision = match self.rules.screen(e, &ctx) {
            RuleOutcome::Safe { rule_id } => Some((AuditDecision::resume(format!("allowed by rule {rule_id}")), rule_id)),
            RuleOutcome::Unsafe { rule_id } => {
                let why = self
                    .rules
                    .get(&rule_id)
                    .map(|r| r.spec.description.clone())
                    .filter(|d| !d.is_empty())
                    .unwrap_or_else(|| "denied".into());
                Some((AuditDecision::terminate(format!("{why} (rule {rule_id})")), rule_id))
            }
            RuleOutcome::Unknown => None,
        };
        if let Some((decision, rule_id)) = rule_decision {
            self.stats.rule_hits += 1;
            return self.finish(e, start, stages, decision, DecidedBy::Rule { rule_id }, Vec::new(), has_new_tool_use, false);
        }

        let mut task_changed = false;
        if input.has_new_tool_use {
            stages.push(Stage::Summarize);
            let msgs = std::mem::take(&mut input.msgs);
            input.has_new_tool_use = false;
            task_changed = summarize::apply(self.summarizer.as_mut(), &mut self.ctx, msgs);
        }
        if task_changed {
            stages.push(Stage::Flush);
            self.cache.flush_task_and_once();
            self.stats.flushes += 1;
        }

        stages.push(Stage::Cache);
        if let CacheLookup::Hit(scope) = self.cache.lookup(e) {
            self.stats.cache_hits += 1;
            let decision = AuditDecision::resume(format!("verified earlier ({scope} scope)"));
            return self.finish(e, start, stages, decision, DecidedBy::Cache { scope }, Vec::new(), has_new_tool_use, task_changed);
        }

        stages.push(Stage::Extract);
        let max_len = tracer.policy().max_enforced_process_level as usize;
        let extraction = chain::extract_dependent_trace(e, tracer, &self.cache, max_len);
        self.stats.pruned_ops += extraction.pruned.len() as u64;
        let query = SecurityQuery {
            task_summary: self.ctx.summary.clone(),
            event: e.clone(),
            chain: extraction.chain,
        };

        stages.push(Stage::Model);
        self.stats.model_queries += 1;
        let (decision, decided_by) = match self.backend.query(&query) {
            Ok(d) => {
                stages.push(Stage::CacheInsert);
                for op in &d.verified_ops {
                    if let Err(err) = self.cache.insert(op) {
                        tracing::warn!(?op, ?err, "verified operation not cached");
                    }
                }
                (d, DecidedBy::Model)
            }
            Err(err) => {
                self.stats.fail_closed += 1;
                tracing::warn!(error = %err, seq = e.seq, "model audit failed; terminating");
                (
                    AuditDecision::terminate(format!("audit backend unavailable: {err}")),
                    DecidedBy::FailClosed {
                        reason: err.to_string(),
                    },
                )
            }
        };

        stages.push(Stage::Record);
        self.last_info = Some(decision.to_outcome());

        stages.push(Stage::Accumulate);
        let elapsed = self.clock.now().saturating_sub(start);
        tracer.charge_audit_time(e.pid, elapsed);

        self.finish(e, start, stages, decision, decided_by, extraction.pruned, has_new_tool_use, task_changed)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        e: &TraceEvent,
        start: std::time::Duration,
        stage_trace: Vec<Stage>,
        decision: AuditDecision,
        decided_by: DecidedBy,
        pruned_ops: Vec<PrunedOp>,
        has_new_tool_use: bool,
        task_changed: bool,
    ) -> AuditRecord {
        let elapsed = self.clock.now().saturating_sub(start);
        AuditRecord {
            seq: e.seq,
            epoch: e.epoch,
            pid: e.pid,
            event: e.clone(),
            stage_trace,
            cache_hit: matches!(decided_by, DecidedBy::Cache { .. }),
            decided_by,
            decision,
            elapsed_ms: u64::try_from(elapsed.as_millis()).unwrap_or(u64::MAX),
            pruned_op_count: pruned_ops.len(),
            pruned_ops,
            has_new_tool_use,
            task_changed,
        }
    }
}
