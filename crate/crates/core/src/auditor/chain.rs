//! Dependent event trace extraction.
//!
//! The context sent to the model is the leaf-to-root process chain of the
//! enforcement event, capped at the maximum enforced level, with each node
//! carrying the file and network operations it performed in the current
//! tool epoch. Operations the cache already covers are pruned.

use serde::{Deserialize, Serialize};

use super::cache::{requirements, Access, EntryKey, Requirement, SecurityQueryCache};
use crate::tracer::{Direction, TraceEvent, Tracer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChainOp {
    File {
        path: String,
        access: String,
    },
    Network {
        host: String,
        port: u16,
        direction: Direction,
    },
    Exec {
        path: String,
    },
}

fn access_name(a: Access) -> &'static str {
    match (a.covers(Access::READ), a.covers(Access::WRITE)) {
        (true, true) => "read_write",
        (true, false) => "read",
        (false, true) => "write",
        (false, false) => "none",
    }
}

fn access_from_name(s: &str) -> Access {
    match s {
        "read" => Access::READ,
        "write" => Access::WRITE,
        "read_write" => Access::READ.union(Access::WRITE),
        _ => Access::NONE,
    }
}

impl ChainOp {
    pub fn from_requirement(req: &Requirement) -> Self {
        match &req.key {
            EntryKey::File(path) => ChainOp::File {
                path: path.clone(),
                access: access_name(req.access).to_string(),
            },
            EntryKey::Network(host, port, direction) => ChainOp::Network {
                host: host.clone(),
                port: *port,
                direction: *direction,
            },
            EntryKey::Binary(path) => ChainOp::Exec { path: path.clone() },
        }
    }

    pub fn requirement(&self) -> Requirement {
        match self {
            ChainOp::File { path, access } => Requirement {
                key: EntryKey::File(path.clone()),
                access: access_from_name(access),
            },
            ChainOp::Network {
                host,
                port,
                direction,
            } => Requirement {
                key: EntryKey::Network(host.clone(), *port, *direction),
                access: Access::NONE,
            },
            ChainOp::Exec { path } => Requirement {
                key: EntryKey::Binary(path.clone()),
                access: Access::NONE,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainNode {
    pub pid: u32,
    pub level: u32,
    pub executable: String,
    pub argv: Vec<String>,
    pub is_shell: bool,
    pub ops: Vec<ChainOp>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessChain {
    /// Leaf first.
    pub nodes: Vec<ChainNode>,
    /// The leaf has no known path to the agent main process.
    pub orphan: bool,
    /// Ancestors beyond the length cap were dropped.
    pub truncated: bool,
}

impl ProcessChain {
    pub fn pids(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.pid).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunedOp {
    pub pid: u32,
    pub seq: u64,
    pub op: ChainOp,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub chain: ProcessChain,
    pub pruned: Vec<PrunedOp>,
}

/// Builds the chain for `event`, pruning operations `cache` covers.
pub fn extract_dependent_trace(
    event: &TraceEvent,
    tracer: &Tracer,
    cache: &SecurityQueryCache,
    max_len: usize,
) -> Extraction {
    let ancestry = tracer.ancestry(event.pid);
    let rooted = ancestry.last() == Some(&tracer.agent_pid());
    let mut out = Extraction::default();
    let pids: Vec<u32> = if rooted {
        out.chain.truncated = ancestry.len() > max_len;
        ancestry.into_iter().take(max_len.max(1)).collect()
    } else {
        out.chain.orphan = true;
        vec![event.pid]
    };

    for pid in pids {
        let (level, executable, argv, is_shell) = match tracer.process(pid) {
            Some(rec) => (rec.level, rec.executable.clone(), rec.argv.clone(), rec.is_shell),
            None => (0, String::new(), Vec::new(), false),
        };
        let mut node = ChainNode {
            pid,
            level,
            executable,
            argv,
            is_shell,
            ops: Vec::new(),
        };
        for past in tracer
            .epoch_trace()
            .iter()
            .filter(|ev| ev.pid == pid && ev.seq != event.seq)
        {
            let Some(reqs) = requirements(past, cache.canon()) else {
                continue;
            };
            for req in reqs {
                let op = ChainOp::from_requirement(&req);
                if cache.covers(&req) {
                    out.pruned.push(PrunedOp {
                        pid,
                        seq: past.seq,
                        op,
                    });
                } else {
                    node.ops.push(op);
                }
            }
        }
        out.chain.nodes.push(node);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auditor::cache::{PathCanon, Permission, Scope, VerifiedOperation};
    use crate::tracer::{
        EnforceDecision, EnforcementPolicy, EventCollector, EventDetail, FileMode, RawEvent, ReplaySource,
    };

    const AGENT: u32 = 1;

    fn tracer() -> Tracer {
        let policy = EnforcementPolicy {
            probes: crate::tracer::ProbeSwitches {
                exec: false,
                file_open_write: false,
                ..Default::default()
            },
            ..Default::default()
        };
        Tracer::new(
            policy,
            AGENT,
            "/usr/bin/python3",
            Box::new(ReplaySource::new(Vec::new())),
            EventCollector::in_memory(),
        )
    }

    fn raw(pid: u32, detail: EventDetail) -> RawEvent {
        RawEvent::new(0, pid, detail)
    }

    fn exec(pid: u32, path: &str) -> RawEvent {
        raw(
            pid,
            EventDetail::Exec {
                path: path.into(),
                argv: vec![path.rsplit('/').next().unwrap().into()],
            },
        )
    }

    fn open(pid: u32, path: &str) -> RawEvent {
        raw(
            pid,
            EventDetail::FileOpen {
                path: path.into(),
                mode: FileMode::Read,
            },
        )
    }

    #[test]
    fn bash_cat_chain() {
        let mut t = tracer();
        t.open_tool_epoch();
        t.ingest(raw(AGENT, EventDetail::Fork { child_pid: 2 }));
        t.ingest(exec(2, "/bin/bash"));
        t.ingest(raw(2, EventDetail::Fork { child_pid: 3 }));
        t.ingest(exec(3, "/bin/cat"));
        let e = t
            .ingest(raw(3, EventDetail::FileRemove { path: "/tmp/x".into() }))
            .event;
        let cache = SecurityQueryCache::new(PathCanon::default());
        let x = extract_dependent_trace(&e, &t, &cache, 4);
        assert_eq!(x.chain.pids(), vec![3, 2, AGENT]);
        assert!(x.chain.nodes[1].is_shell);
        assert_eq!(x.chain.nodes[0].executable, "/bin/cat");
        assert!(!x.chain.orphan && !x.chain.truncated);
        // The event itself is not part of its own context.
        assert_eq!(x.chain.nodes[0].ops, vec![ChainOp::Exec { path: "/bin/cat".into() }]);
    }

    #[test]
    fn chain_is_capped_nearest_first() {
        let mut t = tracer();
        for child in 2..=6 {
            t.ingest(raw(child - 1, EventDetail::Fork { child_pid: child }));
        }
        let e = t.ingest(open(6, "/etc/passwd")).event;
        let cache = SecurityQueryCache::new(PathCanon::default());
        let x = extract_dependent_trace(&e, &t, &cache, 4);
        assert_eq!(x.chain.pids(), vec![6, 5, 4, 3]);
        assert!(x.chain.truncated);
    }

    #[test]
    fn cached_ops_are_pruned() {
        let mut t = tracer();
        t.open_tool_epoch();
        t.ingest(raw(AGENT, EventDetail::Fork { child_pid: 2 }));
        for p in ["/a", "/b", "/c", "/d", "/e"] {
            t.ingest(open(2, p));
        }
        let e = t.ingest(raw(2, EventDetail::Kill { target_pid: 9, signal: 15 })).event;
        t.enforce(2, EnforceDecision::Resume).unwrap();
        let mut cache = SecurityQueryCache::new(PathCanon::default());
        for p in ["/a", "/c", "/e"] {
            cache.insert(&VerifiedOperation::file(p, Permission::Read, Scope::Task)).unwrap();
        }
        let x = extract_dependent_trace(&e, &t, &cache, 4);
        assert_eq!(x.chain.nodes[0].ops.len(), 2);
        assert_eq!(x.pruned.len(), 3);
        for p in &x.pruned {
            assert!(cache.covers(&p.op.requirement()));
        }
        for op in &x.chain.nodes[0].ops {
            assert!(!cache.covers(&op.requirement()));
        }
    }

    #[test]
    fn pre_epoch_ops_are_excluded() {
        let mut t = tracer();
        t.ingest(open(AGENT, "/before"));
        t.open_tool_epoch();
        t.ingest(open(AGENT, "/during"));
        let e = t.ingest(raw(AGENT, EventDetail::Kill { target_pid: 9, signal: 15 })).event;
        let cache = SecurityQueryCache::new(PathCanon::default());
        let x = extract_dependent_trace(&e, &t, &cache, 4);
        assert_eq!(
            x.chain.nodes[0].ops,
            vec![ChainOp::File {
                path: "/during".into(),
                access: "read".into()
            }]
        );
    }

    #[test]
    fn unknown_pid_is_a_flagged_single_node() {
        let t = tracer();
        let e = TraceEvent {
            seq: 1,
            timestamp: 0,
            pid: 77,
            epoch: 0,
            detail: EventDetail::Exit { status: 0 },
            enforcement: true,
            domain: None,
        };
        let cache = SecurityQueryCache::new(PathCanon::default());
        let x = extract_dependent_trace(&e, &t, &cache, 4);
        assert!(x.chain.orphan);
        assert_eq!(x.chain.pids(), vec![77]);
    }
}
