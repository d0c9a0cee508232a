//! System trace layer.
//!
//! The tracer keeps the set of *interesting* processes (the agent and its
//! fork descendants) and, within it, the *enforced* ones: interesting
//! processes at or above the maximum enforced level that still have audit
//! budget left. Events from enforced processes whose probe has enforcement
//! on suspend the process and queue an audit; everything else interesting
//! is only logged.

pub mod collector;
pub mod dns;
pub mod event;
pub mod policy;
pub mod process;
pub mod source;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use collector::EventCollector;
pub use dns::DnsMappingTable;
pub use event::{EventDetail, EventKind, FileMode, NetDetail, RawEvent, TraceEvent};
pub use policy::{EnforcementPolicy, ProbeSwitches};
pub use process::{Direction, NetOp, ProcState, ProcessRecord};
pub use source::{OsSignalSource, ReplaySource, TraceSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Ignored,
    Observed,
    Enforcement,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ingested {
    pub event: TraceEvent,
    pub class: Classification,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceCounters {
    pub total: u64,
    pub ignored: u64,
    pub observed: u64,
    pub enforcement: u64,
    /// Events ingested from a pid the tracer had suspended. Always zero
    /// with a correct backend.
    pub fencing_violations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnforceDecision {
    Suspend,
    Resume,
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnforceAck {
    Applied,
    /// Terminate on a process that is already gone.
    AlreadyGone,
}

#[derive(Debug, Error)]
pub enum EnforceError {
    #[error("pid {0} is not tracked")]
    UnknownPid(u32),
    #[error("pid {pid} is not enforced")]
    NotEnforced { pid: u32 },
    #[error("cannot {decision:?} pid {pid} in state {state:?}")]
    BadState {
        pid: u32,
        decision: EnforceDecision,
        state: ProcState,
    },
    #[error("trace backend refused {decision:?} for pid {pid}: {source}")]
    Backend {
        pid: u32,
        decision: EnforceDecision,
        #[source]
        source: std::io::Error,
    },
}

pub struct Tracer {
    policy: EnforcementPolicy,
    agent_pid: u32,
    processes: BTreeMap<u32, ProcessRecord>,
    enforced: BTreeSet<u32>,
    dns: DnsMappingTable,
    source: Box<dyn TraceSource>,
    collector: EventCollector,
    epoch: u64,
    epoch_trace: Vec<TraceEvent>,
    next_seq: u64,
    pending_audits: VecDeque<TraceEvent>,
    counters: TraceCounters,
    log_only: bool,
    transitions: Vec<(u32, EnforceDecision)>,
}

impl Tracer {
    pub fn new(
        policy: EnforcementPolicy,
        agent_pid: u32,
        agent_executable: &str,
        source: Box<dyn TraceSource>,
        collector: EventCollector,
    ) -> Self {
        let mut processes = BTreeMap::new();
        processes.insert(agent_pid, ProcessRecord::root(agent_pid, agent_executable));
        let mut enforced = BTreeSet::new();
        enforced.insert(agent_pid);
        Self {
            policy,
            agent_pid,
            processes,
            enforced,
            dns: DnsMappingTable::new(),
            source,
            collector,
            epoch: 0,
            epoch_trace: Vec::new(),
            next_seq: 1,
            pending_audits: VecDeque::new(),
            counters: TraceCounters::default(),
            log_only: false,
            transitions: Vec::new(),
        }
    }

    pub fn policy(&self) -> &EnforcementPolicy {
        &self.policy
    }

    pub fn agent_pid(&self) -> u32 {
        self.agent_pid
    }

    pub fn process(&self, pid: u32) -> Option<&ProcessRecord> {
        self.processes.get(&pid)
    }

    pub fn processes(&self) -> impl Iterator<Item = &ProcessRecord> {
        self.processes.values()
    }

    pub fn interesting(&self) -> impl Iterator<Item = u32> + '_ {
        self.processes.values().filter(|p| p.alive).map(|p| p.pid)
    }

    pub fn enforced(&self) -> &BTreeSet<u32> {
        &self.enforced
    }

    pub fn is_enforced(&self, pid: u32) -> bool {
        self.enforced.contains(&pid)
    }

    pub fn dns(&self) -> &DnsMappingTable {
        &self.dns
    }

    pub fn collector(&self) -> &EventCollector {
        &self.collector
    }

    pub fn counters(&self) -> TraceCounters {
        self.counters
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Observed and enforcement events of the current tool epoch.
    pub fn epoch_trace(&self) -> &[TraceEvent] {
        &self.epoch_trace
    }

    /// Every suspend/resume/terminate applied so far, in order.
    pub fn transitions(&self) -> &[(u32, EnforceDecision)] {
        &self.transitions
    }

    pub fn suspended(&self) -> Vec<u32> {
        self.processes
            .values()
            .filter(|p| p.state == ProcState::Suspended)
            .map(|p| p.pid)
            .collect()
    }

    pub fn source(&self) -> &dyn TraceSource {
        self.source.as_ref()
    }

    /// After this, nothing classifies as enforcement any more; events are
    /// still logged.
    pub fn set_log_only(&mut self) {
        self.log_only = true;
    }

    pub fn is_log_only(&self) -> bool {
        self.log_only
    }

    pub fn open_tool_epoch(&mut self) -> u64 {
        self.epoch += 1;
        self.epoch_trace.clear();
        self.epoch
    }

    /// Leaf-to-root pid chain starting at `pid`. Stops at a pid with no
    /// known parent.
    pub fn ancestry(&self, pid: u32) -> Vec<u32> {
        let mut chain = Vec::new();
        let mut cur = Some(pid);
        while let Some(p) = cur {
            let Some(rec) = self.processes.get(&p) else {
                break;
            };
            if chain.contains(&p) {
                break;
            }
            chain.push(p);
            cur = rec.parent_pid;
        }
        chain
    }

    pub fn next_audit(&mut self) -> Option<TraceEvent> {
        self.pending_audits.pop_front()
    }

    pub fn pending_audits(&self) -> usize {
        self.pending_audits.len()
    }

    /// Pulls and ingests one event from the source.
    pub fn poll(&mut self, until: Option<u64>) -> Option<Ingested> {
        let raw = self.source.next_event(until)?;
        Some(self.ingest(raw))
    }

    pub fn ingest(&mut self, raw: RawEvent) -> Ingested {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.counters.total += 1;

        let mut event = TraceEvent {
            seq,
            timestamp: raw.timestamp,
            pid: raw.pid,
            epoch: self.epoch,
            detail: raw.detail,
            enforcement: false,
            domain: None,
        };

        if let EventDetail::DnsResolve { domain, addresses } = &event.detail {
            self.dns.record(domain, addresses, event.timestamp);
        }

        let tracked = self.processes.get(&event.pid).is_some_and(|p| p.alive);
        if !tracked {
            tracing::warn!(pid = event.pid, kind = %event.kind(), seq, "event from unknown pid ignored");
            self.counters.ignored += 1;
            return Ingested {
                event,
                class: Classification::Ignored,
            };
        }

        if self.processes[&event.pid].state == ProcState::Suspended {
            tracing::error!(pid = event.pid, seq, "event from suspended pid");
            self.counters.fencing_violations += 1;
        }

        if let Some(net) = event.detail.net() {
            event.domain = self.dns.lookup(&net.address).map(str::to_string);
        }
        self.update_process_table(&event);

        let enforce = !self.log_only
            && self.policy.probes.enforces(&event.detail)
            && self.enforced.contains(&event.pid)
            && self.processes[&event.pid].state == ProcState::Running;
        event.enforcement = enforce;

        self.collector.push(&event);
        if self.epoch > 0 {
            self.epoch_trace.push(event.clone());
        }

        let class = if enforce {
            self.counters.enforcement += 1;
            if let Err(e) = self.enforce(event.pid, EnforceDecision::Suspend) {
                tracing::error!(pid = event.pid, error = %e, "suspend failed");
            }
            self.pending_audits.push_back(event.clone());
            Classification::Enforcement
        } else {
            self.counters.observed += 1;
            Classification::Observed
        };
        Ingested { event, class }
    }

    fn update_process_table(&mut self, event: &TraceEvent) {
        let pid = event.pid;
        match &event.detail {
            EventDetail::Fork { child_pid } => {
                let parent = &self.processes[&pid];
                if self.processes.get(child_pid).is_some_and(|c| c.alive) {
                    tracing::warn!(child = child_pid, "fork reuses a live pid; replacing record");
                }
                let child = ProcessRecord::child_of(parent, *child_pid);
                if child.level <= self.policy.max_enforced_process_level {
                    self.enforced.insert(*child_pid);
                } else {
                    self.enforced.remove(child_pid);
                }
                self.processes.insert(*child_pid, child);
            }
            EventDetail::Exec { path, argv } => {
                if let Some(rec) = self.processes.get_mut(&pid) {
                    rec.exec(path, argv);
                }
            }
            EventDetail::Exit { .. } => {
                if let Some(rec) = self.processes.get_mut(&pid) {
                    rec.alive = false;
                    rec.state = ProcState::Exited;
                }
                self.enforced.remove(&pid);
            }
            EventDetail::FileOpen { path, mode } => {
                self.push_file_op(pid, path, *mode);
            }
            EventDetail::FileRemove { path } => self.push_file_op(pid, path, FileMode::Write),
            EventDetail::FileRename { from, to } => {
                self.push_file_op(pid, from, FileMode::Write);
                self.push_file_op(pid, to, FileMode::Write);
            }
            EventDetail::NetConnect(n) | EventDetail::NetListen(n) | EventDetail::NetAccept(n) => {
                let direction = match event.kind() {
                    EventKind::NetConnect => Direction::Outbound,
                    EventKind::NetListen => Direction::Listen,
                    _ => Direction::Inbound,
                };
                if let Some(rec) = self.processes.get_mut(&pid) {
                    rec.net_ops.push(NetOp {
                        address: n.address,
                        port: n.port,
                        direction,
                    });
                }
            }
            EventDetail::Kill { .. } | EventDetail::DnsResolve { .. } => {}
        }
    }

    fn push_file_op(&mut self, pid: u32, path: &str, mode: FileMode) {
        if let Some(rec) = self.processes.get_mut(&pid) {
            rec.file_ops.push((path.to_string(), mode));
        }
    }

    /// Applies a suspend/resume/terminate transition and forwards it to the
    /// trace backend.
    pub fn enforce(&mut self, pid: u32, decision: EnforceDecision) -> Result<EnforceAck, EnforceError> {
        let rec = self.processes.get(&pid).ok_or(EnforceError::UnknownPid(pid))?;
        let state = rec.state;
        let next = match (decision, state) {
            (EnforceDecision::Suspend, ProcState::Running) => {
                if !self.enforced.contains(&pid) {
                    return Err(EnforceError::NotEnforced { pid });
                }
                ProcState::Suspended
            }
            (EnforceDecision::Resume, ProcState::Suspended) => ProcState::Running,
            (EnforceDecision::Terminate, ProcState::Suspended) => ProcState::Terminated,
            (EnforceDecision::Terminate, ProcState::Exited | ProcState::Terminated) => {
                tracing::info!(pid, "terminate of a process that is already gone");
                return Ok(EnforceAck::AlreadyGone);
            }
            _ => {
                return Err(EnforceError::BadState {
                    pid,
                    decision,
                    state,
                })
            }
        };
        let delivered = match decision {
            EnforceDecision::Suspend => self.source.suspend(pid),
            EnforceDecision::Resume => self.source.resume(pid),
            EnforceDecision::Terminate => self.source.terminate(pid),
        };
        delivered.map_err(|source| EnforceError::Backend {
            pid,
            decision,
            source,
        })?;
        if let Some(rec) = self.processes.get_mut(&pid) {
            rec.state = next;
        }
        self.transitions.push((pid, decision));
        Ok(EnforceAck::Applied)
    }

    /// Adds audit time to a process and returns what is left of its
    /// budget. Going over the budget removes the pid from the enforced set
    /// for good.
    pub fn charge_audit_time(&mut self, pid: u32, elapsed: Duration) -> Duration {
        let budget = self.policy.audit_time_budget();
        let Some(rec) = self.processes.get_mut(&pid) else {
            return Duration::ZERO;
        };
        rec.audit_time_spent += elapsed;
        if rec.audit_time_spent > budget {
            if self.enforced.remove(&pid) {
                tracing::info!(pid, spent = ?rec.audit_time_spent, "audit budget exhausted; pid no longer enforced");
            }
            Duration::ZERO
        } else {
            budget - rec.audit_time_spent
        }
    }
}
