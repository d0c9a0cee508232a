//! Security query cache.
//!
//! Verified operations are stored in three partitions by validity scope and
//! looked up once -> task -> universal. A once-level hit consumes the entry.
//! File operations with execute permission are also recorded as safe
//! binaries, which is what exec events are checked against. Network
//! operations are keyed by the DNS-annotated domain when there is one and
//! by the literal address otherwise.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tracer::{Direction, EventDetail, EventKind, FileMode, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Once,
    Task,
    Universal,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Once => "once",
            Scope::Task => "task",
            Scope::Universal => "universal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permission {
    Read,
    Write,
    Execute,
}

/// Bit set of file permissions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, PartialOrd, Ord)]
pub struct Access(u8);

impl Access {
    pub const NONE: Access = Access(0);
    pub const READ: Access = Access(1);
    pub const WRITE: Access = Access(2);
    pub const EXECUTE: Access = Access(4);

    pub fn union(self, other: Access) -> Access {
        Access(self.0 | other.0)
    }

    pub fn covers(self, wanted: Access) -> bool {
        self.0 & wanted.0 == wanted.0
    }

    pub fn intersects(self, other: Access) -> bool {
        self.0 & other.0 != 0
    }
}

impl From<Permission> for Access {
    fn from(p: Permission) -> Self {
        match p {
            Permission::Read => Access::READ,
            Permission::Write => Access::WRITE,
            Permission::Execute => Access::EXECUTE,
        }
    }
}

impl From<FileMode> for Access {
    fn from(m: FileMode) -> Self {
        match m {
            FileMode::Read => Access::READ,
            FileMode::Write => Access::WRITE,
            FileMode::ReadWrite => Access::READ.union(Access::WRITE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OpKey {
    File {
        path: String,
        permission: Permission,
    },
    Network {
        host: String,
        port: u16,
        direction: Direction,
    },
    Binary {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerifiedOperation {
    #[serde(flatten)]
    pub key: OpKey,
    pub scope: Scope,
}

impl VerifiedOperation {
    pub fn file(path: impl Into<String>, permission: Permission, scope: Scope) -> Self {
        Self {
            key: OpKey::File {
                path: path.into(),
                permission,
            },
            scope,
        }
    }

    pub fn network(host: impl Into<String>, port: u16, direction: Direction, scope: Scope) -> Self {
        Self {
            key: OpKey::Network {
                host: host.into(),
                port,
                direction,
            },
            scope,
        }
    }

    pub fn binary(path: impl Into<String>, scope: Scope) -> Self {
        Self {
            key: OpKey::Binary { path: path.into() },
            scope,
        }
    }

    /// The operations that would verify `event` itself at `scope`.
    pub fn for_event(event: &TraceEvent, scope: Scope) -> Vec<VerifiedOperation> {
        let mut ops = Vec::new();
        match &event.detail {
            EventDetail::FileOpen { path, mode } => {
                if mode.reads() {
                    ops.push(Self::file(path, Permission::Read, scope));
                }
                if mode.writes() {
                    ops.push(Self::file(path, Permission::Write, scope));
                }
            }
            EventDetail::FileRemove { path } => ops.push(Self::file(path, Permission::Write, scope)),
            EventDetail::FileRename { from, to } => {
                ops.push(Self::file(from, Permission::Write, scope));
                ops.push(Self::file(to, Permission::Write, scope));
            }
            EventDetail::Exec { path, .. } => ops.push(Self::binary(path, scope)),
            EventDetail::NetConnect(_) | EventDetail::NetListen(_) | EventDetail::NetAccept(_) => {
                if let Some(EntryKey::Network(host, port, direction)) = net_key(event) {
                    ops.push(Self::network(host, port, direction, scope));
                }
            }
            _ => {}
        }
        ops
    }
}

/// Cache key without permission, which is tracked separately as [`Access`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKey {
    File(String),
    Network(String, u16, Direction),
    Binary(String),
}

/// One thing an event needs covered for a cache hit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requirement {
    pub key: EntryKey,
    pub access: Access,
}

impl Serialize for Access {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.0)
    }
}

impl<'de> Deserialize<'de> for Access {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Access(u8::deserialize(d)? & 7))
    }
}

/// Lexically normalizes an absolute path (`.`/`..`/duplicate slashes).
/// Returns `None` for relative paths.
pub fn normalize_path(path: &str) -> Option<String> {
    if !path.starts_with('/') {
        return None;
    }
    let mut parts: Vec<&str> = Vec::new();
    for seg in path.split('/') {
        match seg {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            s => parts.push(s),
        }
    }
    Some(format!("/{}", parts.join("/")))
}

/// Path canonicalization policy. Symlinks are resolved against the local
/// filesystem only when requested; replayed traces are already resolved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PathCanon {
    pub resolve_symlinks: bool,
}

impl PathCanon {
    pub fn canonical(&self, path: &str) -> Option<String> {
        let lexical = normalize_path(path)?;
        if self.resolve_symlinks {
            if let Ok(real) = std::fs::canonicalize(&lexical) {
                if let Some(s) = real.to_str() {
                    return Some(s.to_string());
                }
            }
        }
        Some(lexical)
    }
}

fn net_key(event: &TraceEvent) -> Option<EntryKey> {
    let net = event.detail.net()?;
    let direction = match event.kind() {
        EventKind::NetConnect => Direction::Outbound,
        EventKind::NetListen => Direction::Listen,
        _ => Direction::Inbound,
    };
    let host = event
        .domain
        .clone()
        .unwrap_or_else(|| net.address.to_string());
    Some(EntryKey::Network(host, net.port, direction))
}

/// What `event` needs covered, or `None` when the event kind is not
/// cacheable (process control other than exec).
pub fn requirements(event: &TraceEvent, canon: PathCanon) -> Option<Vec<Requirement>> {
    let file = |path: &str, access: Access| Requirement {
        key: EntryKey::File(canon.canonical(path).unwrap_or_else(|| path.to_string())),
        access,
    };
    match &event.detail {
        EventDetail::FileOpen { path, mode } => Some(vec![file(path, (*mode).into())]),
        EventDetail::FileRemove { path } => Some(vec![file(path, Access::WRITE)]),
        EventDetail::FileRename { from, to } => {
            Some(vec![file(from, Access::WRITE), file(to, Access::WRITE)])
        }
        EventDetail::Exec { path, .. } => Some(vec![Requirement {
            key: EntryKey::Binary(canon.canonical(path).unwrap_or_else(|| path.clone())),
            access: Access::NONE,
        }]),
        EventDetail::NetConnect(_) | EventDetail::NetListen(_) | EventDetail::NetAccept(_) => {
            Some(vec![Requirement {
                key: net_key(event)?,
                access: Access::NONE,
            }])
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheLookup {
    Hit(Scope),
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum InsertError {
    RelativePath,
}

#[derive(Debug, Default, Clone)]
pub struct SecurityQueryCache {
    /// Once entries are a multiset: each verification covers one occurrence.
    once: BTreeMap<EntryKey, Vec<Access>>,
    task: BTreeMap<EntryKey, Access>,
    universal: BTreeMap<EntryKey, Access>,
    canon: PathCanon,
}

impl SecurityQueryCache {
    pub fn new(canon: PathCanon) -> Self {
        Self {
            canon,
            ..Default::default()
        }
    }

    pub fn canon(&self) -> PathCanon {
        self.canon
    }

    fn entries_for(op: &VerifiedOperation, canon: PathCanon) -> Result<Vec<(EntryKey, Access)>, InsertError> {
        Ok(match &op.key {
            OpKey::File { path, permission } => {
                let path = canon.canonical(path).ok_or(InsertError::RelativePath)?;
                let mut out = vec![(EntryKey::File(path.clone()), Access::from(*permission))];
                if *permission == Permission::Execute {
                    out.push((EntryKey::Binary(path), Access::NONE));
                }
                out
            }
            OpKey::Binary { path } => {
                let path = canon.canonical(path).ok_or(InsertError::RelativePath)?;
                vec![(EntryKey::Binary(path), Access::NONE)]
            }
            OpKey::Network {
                host,
                port,
                direction,
            } => vec![(EntryKey::Network(host.clone(), *port, *direction), Access::NONE)],
        })
    }

    pub fn insert(&mut self, op: &VerifiedOperation) -> Result<(), InsertError> {
        for (key, access) in Self::entries_for(op, self.canon)? {
            match op.scope {
                Scope::Once => self.once.entry(key).or_default().push(access),
                Scope::Task => {
                    let slot = self.task.entry(key).or_default();
                    *slot = slot.union(access);
                }
                Scope::Universal => {
                    let slot = self.universal.entry(key).or_default();
                    *slot = slot.union(access);
                }
            }
        }
        Ok(())
    }

    /// Which partition would satisfy `req`, without consuming anything.
    pub fn covering_scope(&self, req: &Requirement) -> Option<Scope> {
        if self
            .once
            .get(&req.key)
            .is_some_and(|v| v.iter().any(|a| a.covers(req.access)))
        {
            return Some(Scope::Once);
        }
        if self.task.get(&req.key).is_some_and(|a| a.covers(req.access)) {
            return Some(Scope::Task);
        }
        if self.universal.get(&req.key).is_some_and(|a| a.covers(req.access)) {
            return Some(Scope::Universal);
        }
        None
    }

    pub fn covers(&self, req: &Requirement) -> bool {
        self.covering_scope(req).is_some()
    }

    /// Looks up an enforcement event. Every requirement must be covered;
    /// only then are the once-level entries used consumed. The reported
    /// scope is the narrowest one involved.
    pub fn lookup(&mut self, event: &TraceEvent) -> CacheLookup {
        let Some(raw) = requirements(event, self.canon) else {
            return CacheLookup::Miss;
        };
        // A rename onto itself names one key twice; it needs one entry.
        let mut reqs: Vec<Requirement> = Vec::with_capacity(raw.len());
        for req in raw {
            match reqs.iter_mut().find(|r| r.key == req.key) {
                Some(r) => r.access = r.access.union(req.access),
                None => reqs.push(req),
            }
        }
        let mut scopes = Vec::with_capacity(reqs.len());
        for req in &reqs {
            match self.covering_scope(req) {
                Some(s) => scopes.push(s),
                None => return CacheLookup::Miss,
            }
        }
        for (req, scope) in reqs.iter().zip(&scopes) {
            if *scope == Scope::Once {
                let list = self.once.get_mut(&req.key).expect("covered once entry exists");
                let idx = list
                    .iter()
                    .position(|a| a.covers(req.access))
                    .expect("covered once entry exists");
                list.remove(idx);
                if list.is_empty() {
                    self.once.remove(&req.key);
                }
            }
        }
        CacheLookup::Hit(scopes.into_iter().min().expect("non-empty requirements"))
    }

    pub fn flush_task_and_once(&mut self) {
        self.once.clear();
        self.task.clear();
    }

    pub fn len(&self, scope: Scope) -> usize {
        match scope {
            Scope::Once => self.once.values().map(Vec::len).sum(),
            Scope::Task => self.task.len(),
            Scope::Universal => self.universal.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.once.is_empty() && self.task.is_empty() && self.universal.is_empty()
    }

    /// Snapshot of one partition, for tests and diagnostics.
    pub fn partition(&self, scope: Scope) -> Vec<(EntryKey, Access)> {
        match scope {
            Scope::Once => self
                .once
                .iter()
                .flat_map(|(k, v)| v.iter().map(move |a| (k.clone(), *a)))
                .collect(),
            Scope::Task => self.task.iter().map(|(k, a)| (k.clone(), *a)).collect(),
            Scope::Universal => self.universal.iter().map(|(k, a)| (k.clone(), *a)).collect(),
        }
    }
}
