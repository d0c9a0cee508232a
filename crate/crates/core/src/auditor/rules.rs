//! Rule-based pre-screen.
//!
//! Rules are evaluated in `(priority, id)` order and the first match
//! decides. Every filter present on a rule must match (logical AND); a
//! filter that does not apply to the event's kind makes the rule miss.
//!
//! Rule file format (TOML):
//!
//! ```toml
//! [[rule]]
//! id = "deny-shadow-write"
//! priority = 10
//! kind = ["file_open", "file_remove"]   # or a single name, or "any"
//! path_glob = "/etc/shadow"             # file paths and exec binaries
//! mode = "write"                        # file_open access filter
//! verdict = "unsafe"
//! description = "shadow database is off limits"
//! ```
//!
//! `path_glob` uses `*` within one path segment and `**` across segments.
//! `argv_glob` is matched against the space-joined argv of exec events and
//! its `*` crosses `/`. `addr_glob` is matched against the DNS domain and
//! the literal address of network events. `target` restricts kill events
//! to signals aimed at the agent main process (`is_agent_main`) or at any
//! ancestor of the sender (`is_ancestor`).

use std::collections::BTreeSet;

use globset::{GlobBuilder, GlobMatcher};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cache::Access;
use crate::model::AgentBasicInfo;
use crate::tracer::{EventDetail, EventKind, FileMode, TraceEvent};

pub const BUILTIN_PREFIX: &str = "builtin:";
pub const PROTECT_AGENT_RULE: &str = "builtin:protect-agent-main";
pub const PROTECT_FILES_RULE: &str = "builtin:protect-dependent-files";
const BUILTIN_PRIORITY: i64 = i64::MIN;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct RuleError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleVerdict {
    Safe,
    Unsafe,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRelation {
    #[default]
    Any,
    IsAgentMain,
    IsAncestor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn items(&self) -> Vec<&str> {
        match self {
            OneOrMany::One(s) => vec![s.as_str()],
            OneOrMany::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

/// A rule as written in the rule file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub id: String,
    #[serde(default)]
    pub priority: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<OneOrMany>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_glob: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argv_glob: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addr_glob: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<FileMode>,
    #[serde(default, skip_serializing_if = "is_any")]
    pub target: TargetRelation,
    pub verdict: RuleVerdict,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

fn is_any(t: &TargetRelation) -> bool {
    *t == TargetRelation::Any
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    #[serde(default)]
    rule: Vec<toml::Spanned<RuleSpec>>,
}

#[derive(Debug, Serialize)]
struct RuleFileOut<'a> {
    rule: Vec<&'a RuleSpec>,
}

#[derive(Debug, Clone)]
enum PathMatcher {
    Glob(GlobMatcher),
    Exact(BTreeSet<String>),
}

impl PathMatcher {
    fn is_match(&self, path: &str) -> bool {
        match self {
            PathMatcher::Glob(g) => g.is_match(path),
            PathMatcher::Exact(set) => set.contains(path),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub spec: RuleSpec,
    kinds: Option<BTreeSet<EventKind>>,
    path: Option<PathMatcher>,
    argv: Option<GlobMatcher>,
    addr: Option<GlobMatcher>,
}

/// Facts about the event's surroundings a rule may test.
#[derive(Debug, Clone, Copy)]
pub struct RuleContext<'a> {
    pub agent_pid: u32,
    /// Ancestors of the event's process, nearest first, excluding itself.
    pub ancestors: &'a [u32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleOutcome {
    Safe { rule_id: String },
    Unsafe { rule_id: String },
    Unknown,
}

fn path_glob(pattern: &str) -> Result<GlobMatcher, globset::Error> {
    Ok(GlobBuilder::new(pattern)
        .literal_separator(true)
        .build()?
        .compile_matcher())
}

fn free_glob(pattern: &str) -> Result<GlobMatcher, globset::Error> {
    Ok(GlobBuilder::new(pattern)
        .literal_separator(false)
        .build()?
        .compile_matcher())
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside the byte range of one rule table, falling
/// back to the table's first line.
fn line_of_key(text: &str, span: std::ops::Range<usize>, key: &str) -> usize {
    let body = &text[span.start.min(text.len())..span.end.min(text.len())];
    let found = body.lines().scan(0usize, |off, l| {
        let here = *off;
        *off += l.len() + 1;
        Some((here, l))
    });
    for (off, l) in found {
        if l.trim_start().starts_with(key) {
            return line_of(text, span.start + off);
        }
    }
    line_of(text, span.start)
}

impl Rule {
    pub fn compile(spec: RuleSpec) -> Result<Self, (String, &'static str)> {
        let kinds = match &spec.kind {
            None => None,
            Some(k) => {
                let items = k.items();
                if items.contains(&"any") {
                    None
                } else {
                    let mut set = BTreeSet::new();
                    for name in items {
                        let kind = EventKind::parse(name)
                            .ok_or_else(|| (format!("unknown event kind {name:?}"), "kind"))?;
                        set.insert(kind);
                    }
                    Some(set)
                }
            }
        };
        let path = spec
            .path_glob
            .as_deref()
            .map(|p| path_glob(p).map(PathMatcher::Glob))
            .transpose()
            .map_err(|e| (format!("bad path_glob: {e}"), "path_glob"))?;
        let argv = spec
            .argv_glob
            .as_deref()
            .map(free_glob)
            .transpose()
            .map_err(|e| (format!("bad argv_glob: {e}"), "argv_glob"))?;
        let addr = spec
            .addr_glob
            .as_deref()
            .map(free_glob)
            .transpose()
            .map_err(|e| (format!("bad addr_glob: {e}"), "addr_glob"))?;
        Ok(Self {
            spec,
            kinds,
            path,
            argv,
            addr,
        })
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn matches(&self, event: &TraceEvent, ctx: &RuleContext<'_>) -> bool {
        if let Some(kinds) = &self.kinds {
            if !kinds.contains(&event.kind()) {
                return false;
            }
        }
        if let Some(mode) = self.spec.mode {
            let wanted = Access::from(mode);
            let access = match &event.detail {
                EventDetail::FileOpen { mode, .. } => Access::from(*mode),
                EventDetail::FileRemove { .. } | EventDetail::FileRename { .. } => Access::WRITE,
                _ => return false,
            };
            if !access.intersects(wanted) {
                return false;
            }
        }
        if let Some(path) = &self.path {
            let hit = match &event.detail {
                EventDetail::Exec { path: p, .. } => path.is_match(p),
                d => {
                    let paths = d.file_paths();
                    !paths.is_empty() && paths.iter().any(|p| path.is_match(p))
                }
            };
            if !hit {
                return false;
            }
        }
        if let Some(argv) = &self.argv {
            match &event.detail {
                EventDetail::Exec { argv: a, .. } if argv.is_match(a.join(" ")) => {}
                _ => return false,
            }
        }
        if let Some(addr) = &self.addr {
            let Some(net) = event.detail.net() else {
                return false;
            };
            let domain_hit = event.domain.as_deref().is_some_and(|d| addr.is_match(d));
            if !domain_hit && !addr.is_match(net.address.to_string()) {
                return false;
            }
        }
        match self.spec.target {
            TargetRelation::Any => true,
            TargetRelation::IsAgentMain => {
                matches!(event.detail, EventDetail::Kill { target_pid, .. } if target_pid == ctx.agent_pid)
            }
            TargetRelation::IsAncestor => {
                matches!(event.detail, EventDetail::Kill { target_pid, .. } if ctx.ancestors.contains(&target_pid))
            }
        }
    }
}

/// Parses and compiles a rule file. Errors carry the offending line.
pub fn parse_rules(text: &str) -> Result<Vec<Rule>, RuleError> {
    let file: RuleFile = toml::from_str(text).map_err(|e| RuleError {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let mut seen = BTreeSet::new();
    let mut rules = Vec::with_capacity(file.rule.len());
    for spanned in file.rule {
        let span = spanned.span();
        let spec = spanned.into_inner();
        let err = |key: &str, message: String| RuleError {
            line: line_of_key(text, span.clone(), key),
            message,
        };
        if spec.id.is_empty() {
            return Err(err("id", "rule id must not be empty".into()));
        }
        if spec.id.starts_with(BUILTIN_PREFIX) {
            return Err(err("id", format!("rule id {:?} uses the reserved prefix", spec.id)));
        }
        if spec.priority == BUILTIN_PRIORITY {
            return Err(err("priority", "priority i64::MIN is reserved".into()));
        }
        if !seen.insert(spec.id.clone()) {
            return Err(err("id", format!("duplicate rule id {:?}", spec.id)));
        }
        let rule = Rule::compile(spec).map_err(|(message, key)| err(key, message))?;
        rules.push(rule);
    }
    Ok(rules)
}

#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    /// Builds the effective rule set: the built-in protections for `agent`
    /// followed by `user` rules, all sorted by `(priority, id)`.
    pub fn new(user: Vec<Rule>, agent: &AgentBasicInfo) -> Self {
        let mut rules = builtin_rules(agent);
        rules.extend(user);
        rules.sort_by(|a, b| {
            (a.spec.priority, &a.spec.id).cmp(&(b.spec.priority, &b.spec.id))
        });
        Self { rules }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn screen(&self, event: &TraceEvent, ctx: &RuleContext<'_>) -> RuleOutcome {
        for rule in &self.rules {
            if rule.matches(event, ctx) {
                let rule_id = rule.spec.id.clone();
                return match rule.spec.verdict {
                    RuleVerdict::Safe => RuleOutcome::Safe { rule_id },
                    RuleVerdict::Unsafe => RuleOutcome::Unsafe { rule_id },
                };
            }
        }
        RuleOutcome::Unknown
    }

    pub fn get(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.spec.id == id)
    }
}

/// Canonical TOML rendering of user rules in evaluation order.
pub fn render_rules(rules: &[Rule]) -> String {
    let mut specs: Vec<&RuleSpec> = rules
        .iter()
        .filter(|r| !r.spec.id.starts_with(BUILTIN_PREFIX))
        .map(|r| &r.spec)
        .collect();
    specs.sort_by(|a, b| (a.priority, &a.id).cmp(&(b.priority, &b.id)));
    toml::to_string(&RuleFileOut { rule: specs }).expect("rules serialize")
}

fn builtin_rules(agent: &AgentBasicInfo) -> Vec<Rule> {
    let mut out = vec![Rule {
        spec: RuleSpec {
            id: PROTECT_AGENT_RULE.into(),
            priority: BUILTIN_PRIORITY,
            kind: Some(OneOrMany::One("kill".into())),
            path_glob: None,
            argv_glob: None,
            addr_glob: None,
            mode: None,
            target: TargetRelation::IsAgentMain,
            verdict: RuleVerdict::Unsafe,
            description: "signal aimed at the agent main process".into(),
        },
        kinds: Some([EventKind::Kill].into()),
        path: None,
        argv: None,
        addr: None,
    }];
    if !agent.dependent_files.is_empty() {
        let files: BTreeSet<String> = agent
            .dependent_files
            .iter()
            .map(|p| super::cache::normalize_path(p).unwrap_or_else(|| p.clone()))
            .collect();
        out.push(Rule {
            spec: RuleSpec {
                id: PROTECT_FILES_RULE.into(),
                priority: BUILTIN_PRIORITY,
                kind: Some(OneOrMany::Many(vec![
                    "file_open".into(),
                    "file_remove".into(),
                    "file_rename".into(),
                ])),
                path_glob: None,
                argv_glob: None,
                addr_glob: None,
                mode: Some(FileMode::Write),
                target: TargetRelation::Any,
                verdict: RuleVerdict::Unsafe,
                description: "modification of a file the agent depends on".into(),
            },
            kinds: Some(
                [EventKind::FileOpen, EventKind::FileRemove, EventKind::FileRename].into(),
            ),
            path: Some(PathMatcher::Exact(files)),
            argv: None,
            addr: None,
        });
    }
    out
}
