//! Per-session trace and audit pipeline.
//!
//! A [`Pipeline`] owns the session's tracer, auditor and audit log. It is
//! driven by [`Pipeline::pump`], which ingests events up to a timestamp and
//! audits every queued enforcement event serially, routing each decision
//! back to the tracer and, for terminations, to the session's alert slot.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use super::config::{AuditorConfig, ConfigError, LoadedConfig, TraceSourceConfig};
use super::session::{lock, SessionHost, SharedState};
use crate::auditor::log::AuditLog;
use crate::auditor::{
    AuditInput, AuditRecord, AuditStats, Auditor, DisabledBackend, ModelBackend, PathCanon, RemoteAuditor,
    RuleSet, SecurityQueryCache, StubAuditor, StubSummarizer,
};
use crate::auditor::rules::Rule;
use crate::clock::{ManualClock, SharedClock};
use crate::model::{AgentBasicInfo, Verdict};
use crate::tracer::event::parse_trace_jsonl;
use crate::tracer::{
    EnforceDecision, EnforcementPolicy, EventCollector, RawEvent, ReplaySource, TraceCounters, Tracer,
};

/// Which model backend a session gets.
#[derive(Debug, Clone)]
pub enum BackendSpec {
    /// Stub script text.
    Stub(String),
    Remote {
        endpoint: String,
        api_key: Option<String>,
        timeout: Duration,
    },
    Disabled,
}

/// Everything needed to build a session pipeline. Each session gets its
/// own tracer, cache, summarizer, backend and log files.
#[derive(Clone)]
pub struct SessionEnv {
    pub policy: EnforcementPolicy,
    pub rules: Vec<Rule>,
    pub backend: BackendSpec,
    /// Recorded events every session replays.
    pub trace: Vec<RawEvent>,
    pub clock: SharedClock,
    /// Set when time is simulated; the stub auditor advances it.
    pub manual_clock: Option<Arc<ManualClock>>,
    pub log_dir: Option<PathBuf>,
    pub canon: PathCanon,
}

fn read(path: &std::path::Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl SessionEnv {
    pub fn from_loaded(
        loaded: &LoadedConfig,
        clock: SharedClock,
        manual_clock: Option<Arc<ManualClock>>,
    ) -> Result<Self, ConfigError> {
        let trace = match &loaded.config.trace_source {
            TraceSourceConfig::Replay(path) => parse_trace_jsonl(&read(path)?).map_err(|e| ConfigError::Parse {
                path: path.clone(),
                message: e.to_string(),
            })?,
            TraceSourceConfig::Os => {
                return Err(ConfigError::Invalid(
                    "trace_source \"os\" needs an external probe feed, which this build does not include; use a replay source"
                        .into(),
                ))
            }
        };
        let backend = match &loaded.config.auditor {
            AuditorConfig::Stub(path) => {
                let text = read(path)?;
                StubAuditor::from_script(&text).map_err(|e| ConfigError::Parse {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                BackendSpec::Stub(text)
            }
            AuditorConfig::Remote(r) => BackendSpec::Remote {
                endpoint: r.endpoint.clone(),
                api_key: r.key_env.as_ref().and_then(|k| std::env::var(k).ok()),
                timeout: Duration::from_secs(r.timeout_secs),
            },
            AuditorConfig::Disabled => BackendSpec::Disabled,
        };
        Ok(Self {
            policy: loaded.policy.clone(),
            rules: loaded.rules.clone(),
            backend,
            trace,
            clock,
            manual_clock,
            log_dir: loaded.config.log_dir.clone(),
            canon: PathCanon::default(),
        })
    }

    fn backend(&self) -> Result<Box<dyn ModelBackend>, String> {
        Ok(match &self.backend {
            BackendSpec::Stub(text) => {
                let mut stub = StubAuditor::from_script(text).map_err(|e| e.to_string())?;
                if let Some(clock) = &self.manual_clock {
                    stub = stub.with_clock(clock.clone());
                }
                Box::new(stub)
            }
            BackendSpec::Remote {
                endpoint,
                api_key,
                timeout,
            } => Box::new(RemoteAuditor::new(endpoint.clone(), api_key.clone(), *timeout)),
            BackendSpec::Disabled => Box::new(DisabledBackend),
        })
    }

    pub fn build_pipeline(&self, info: &AgentBasicInfo, state: SharedState) -> Result<Pipeline, String> {
        let nonce = lock(&state).nonce.clone();
        let start_ms = self.clock.now().as_millis();
        let (collector, log) = match &self.log_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
                let stem = format!("{nonce}-{start_ms}");
                let events = dir.join(format!("{stem}.events.jsonl"));
                let audit = dir.join(format!("{stem}.audit.jsonl"));
                (
                    EventCollector::with_file(&events).map_err(|e| format!("cannot open {}: {e}", events.display()))?,
                    AuditLog::with_file(&audit).map_err(|e| format!("cannot open {}: {e}", audit.display()))?,
                )
            }
            None => (EventCollector::in_memory(), AuditLog::in_memory()),
        };
        let tracer = Tracer::new(
            self.policy.clone(),
            info.agent_process_id,
            &info.agent_name,
            Box::new(ReplaySource::new(self.trace.clone())),
            collector,
        );
        let auditor = Auditor::new(
            RuleSet::new(self.rules.clone(), info),
            SecurityQueryCache::new(self.canon),
            Box::new(StubSummarizer::new()),
            self.backend()?,
            self.clock.clone(),
        );
        tracing::info!(%nonce, agent = info.agent_process_id, backend = auditor.backend_name(), "tracing started");
        Ok(Pipeline::new(tracer, auditor, log, state))
    }
}

pub struct Pipeline {
    tracer: Tracer,
    auditor: Auditor,
    log: AuditLog,
    state: SharedState,
    dropped_decisions: u64,
}

impl Pipeline {
    pub fn new(tracer: Tracer, auditor: Auditor, log: AuditLog, state: SharedState) -> Self {
        Self {
            tracer,
            auditor,
            log,
            state,
            dropped_decisions: 0,
        }
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }

    pub fn auditor(&self) -> &Auditor {
        &self.auditor
    }

    pub fn records(&self) -> &[AuditRecord] {
        self.log.records()
    }

    pub fn counters(&self) -> TraceCounters {
        self.tracer.counters()
    }

    pub fn stats(&self) -> AuditStats {
        self.auditor.stats()
    }

    pub fn state(&self) -> &SharedState {
        &self.state
    }

    /// Decisions that could not be applied because the process was gone
    /// or unknown.
    pub fn dropped_decisions(&self) -> u64 {
        self.dropped_decisions
    }

    /// Ingests events with `timestamp <= until` and audits everything that
    /// got queued. Returns the number of events ingested.
    pub fn pump(&mut self, until: Option<u64>) -> usize {
        let mut ingested = 0;
        loop {
            self.audit_queued();
            self.sync_epoch();
            if self.tracer.poll(until).is_none() {
                break;
            }
            ingested += 1;
        }
        self.audit_queued();
        ingested
    }

    /// True when no process waits on a decision.
    pub fn is_quiescent(&self) -> bool {
        self.tracer.pending_audits() == 0 && self.tracer.suspended().is_empty()
    }

    pub fn source_exhausted(&self) -> bool {
        self.tracer.source().is_exhausted()
    }

    fn sync_epoch(&mut self) {
        let (requested, closed) = {
            let st = lock(&self.state);
            (st.requested_epoch, st.closed)
        };
        while self.tracer.epoch() < requested {
            self.tracer.open_tool_epoch();
        }
        if closed && !self.tracer.is_log_only() {
            // Queued audits were drained by the caller; nothing captured
            // before the close goes unaudited.
            debug_assert_eq!(self.tracer.pending_audits(), 0);
            self.tracer.set_log_only();
            tracing::info!("session closed; tracer is now log-only");
        }
    }

    fn audit_queued(&mut self) {
        while let Some(event) = self.tracer.next_audit() {
            let mut input = std::mem::take(&mut lock(&self.state).pending);
            let record = self.auditor.audit(&event, &mut self.tracer, &mut input);
            {
                let mut st = lock(&self.state);
                if !input.msgs.is_empty() || input.has_new_tool_use {
                    // Not consumed (a rule decided first); keep it ahead of
                    // anything that arrived during the audit.
                    let later = std::mem::take(&mut st.pending);
                    input.msgs.extend(later.msgs);
                    input.has_new_tool_use |= later.has_new_tool_use;
                    st.pending = input;
                }
                let ctx = self.auditor.task_context();
                st.task_ctx.summary = ctx.summary.clone();
                st.task_ctx.task_epoch = ctx.task_epoch;
                st.task_ctx.changed = ctx.changed;
            }
            self.route_decision(&record);
            self.log.append(record);
        }
    }

    fn route_decision(&mut self, record: &AuditRecord) {
        let pid = record.pid;
        let decision = match record.decision.verdict {
            Verdict::Resume => EnforceDecision::Resume,
            Verdict::Terminate => EnforceDecision::Terminate,
        };
        match self.tracer.enforce(pid, decision) {
            Ok(_) => {}
            Err(e) => {
                self.dropped_decisions += 1;
                tracing::warn!(pid, error = %e, "decision dropped");
                return;
            }
        }
        if decision == EnforceDecision::Terminate {
            lock(&self.state).last_enforcement = Some(record.decision.to_outcome());
        }
    }
}

/// A session's pipeline slot plus the environment that fills it.
pub struct SessionSlot {
    env: Arc<SessionEnv>,
    pipeline: std::sync::Mutex<Option<Pipeline>>,
}

impl SessionSlot {
    pub fn new(env: Arc<SessionEnv>) -> Arc<Self> {
        Arc::new(Self {
            env,
            pipeline: std::sync::Mutex::new(None),
        })
    }

    /// Runs `f` on the pipeline if tracing has started.
    pub fn with_pipeline<R>(&self, f: impl FnOnce(&mut Pipeline) -> R) -> Option<R> {
        let mut guard = self.pipeline.lock().unwrap_or_else(|p| p.into_inner());
        guard.as_mut().map(f)
    }

    pub fn take_pipeline(&self) -> Option<Pipeline> {
        self.pipeline.lock().unwrap_or_else(|p| p.into_inner()).take()
    }
}

impl SessionHost for SessionSlot {
    fn start_tracing(&self, info: &AgentBasicInfo, state: &SharedState) -> Result<(), String> {
        let pipeline = self.env.build_pipeline(info, state.clone())?;
        *self.pipeline.lock().unwrap_or_else(|p| p.into_inner()) = Some(pipeline);
        Ok(())
    }
}

/// Pending-message view used by tests.
pub fn pending_input(state: &SharedState) -> AuditInput {
    lock(state).pending.clone()
}
