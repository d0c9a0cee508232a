//! Enforcement policy and its TOML file format.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::event::EventDetail;

pub const DEFAULT_MAX_ENFORCED_LEVEL: u32 = 4;
pub const DEFAULT_AUDIT_TIME_BUDGET: Duration = Duration::from_secs(110);

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("cannot read policy file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("policy file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("max_enforced_process_level must be >= 1")]
    ZeroLevel,
    #[error("audit_time_budget_ms must be > 0")]
    ZeroBudget,
}

/// Per-probe enforcement switches. `file_open` is split by access mode so
/// that reads and writes can be enforced independently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSwitches {
    pub fork: bool,
    pub exec: bool,
    pub kill: bool,
    pub exit: bool,
    pub file_open_read: bool,
    pub file_open_write: bool,
    pub file_remove: bool,
    pub file_rename: bool,
    pub net_connect: bool,
    pub net_listen: bool,
    pub net_accept: bool,
    pub dns_resolve: bool,
}

impl Default for ProbeSwitches {
    fn default() -> Self {
        Self {
            fork: false,
            exec: true,
            kill: true,
            exit: false,
            file_open_read: false,
            file_open_write: true,
            file_remove: true,
            file_rename: true,
            net_connect: true,
            net_listen: true,
            net_accept: false,
            dns_resolve: false,
        }
    }
}

impl ProbeSwitches {
    pub fn all_on() -> Self {
        Self {
            fork: true,
            exec: true,
            kill: true,
            exit: true,
            file_open_read: true,
            file_open_write: true,
            file_remove: true,
            file_rename: true,
            net_connect: true,
            net_listen: true,
            net_accept: true,
            dns_resolve: true,
        }
    }

    pub fn enforces(&self, detail: &EventDetail) -> bool {
        match detail {
            EventDetail::Fork { .. } => self.fork,
            EventDetail::Exec { .. } => self.exec,
            EventDetail::Kill { .. } => self.kill,
            EventDetail::Exit { .. } => self.exit,
            EventDetail::FileOpen { mode, .. } => {
                (mode.reads() && self.file_open_read) || (mode.writes() && self.file_open_write)
            }
            EventDetail::FileRemove { .. } => self.file_remove,
            EventDetail::FileRename { .. } => self.file_rename,
            EventDetail::NetConnect(_) => self.net_connect,
            EventDetail::NetListen(_) => self.net_listen,
            EventDetail::NetAccept(_) => self.net_accept,
            EventDetail::DnsResolve { .. } => self.dns_resolve,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnforcementPolicy {
    #[serde(default = "default_level")]
    pub max_enforced_process_level: u32,
    #[serde(default = "default_budget_ms")]
    pub audit_time_budget_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_file: Option<PathBuf>,
    #[serde(default)]
    pub probes: ProbeSwitches,
}

fn default_level() -> u32 {
    DEFAULT_MAX_ENFORCED_LEVEL
}

fn default_budget_ms() -> u64 {
    DEFAULT_AUDIT_TIME_BUDGET.as_millis() as u64
}

impl Default for EnforcementPolicy {
    fn default() -> Self {
        Self {
            max_enforced_process_level: default_level(),
            audit_time_budget_ms: default_budget_ms(),
            rule_file: None,
            probes: ProbeSwitches::default(),
        }
    }
}

impl EnforcementPolicy {
    pub fn audit_time_budget(&self) -> Duration {
        Duration::from_millis(self.audit_time_budget_ms)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.max_enforced_process_level == 0 {
            return Err(PolicyError::ZeroLevel);
        }
        if self.audit_time_budget_ms == 0 {
            return Err(PolicyError::ZeroBudget);
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self, PolicyError> {
        let policy: Self = toml::from_str(text).map_err(|e| PolicyError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        policy.validate()?;
        Ok(policy)
    }

    /// Loads a policy file. A relative `rule_file` is resolved against the
    /// policy file's directory.
    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut policy = Self::parse(&text, path)?;
        if let (Some(rule_file), Some(dir)) = (&policy.rule_file, path.parent()) {
            if rule_file.is_relative() {
                policy.rule_file = Some(dir.join(rule_file));
            }
        }
        Ok(policy)
    }

    /// Canonical TOML rendering; parsing it back yields an equal policy.
    pub fn render(&self) -> String {
        toml::to_string(self).expect("policy serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracer::event::FileMode;
    use proptest::prelude::*;

    #[test]
    fn defaults_match_documented_values() {
        let p = EnforcementPolicy::default();
        assert_eq!(p.max_enforced_process_level, 4);
        assert_eq!(p.audit_time_budget(), Duration::from_secs(110));
        let probes = &p.probes;
        assert!(probes.exec && probes.kill && probes.file_open_write);
        assert!(probes.file_remove && probes.file_rename && probes.net_connect && probes.net_listen);
        assert!(!probes.fork && !probes.exit && !probes.net_accept && !probes.dns_resolve);
        assert!(!probes.file_open_read);
    }

    #[test]
    fn empty_file_gives_defaults() {
        let p = EnforcementPolicy::parse("", Path::new("p.toml")).unwrap();
        assert_eq!(p, EnforcementPolicy::default());
    }

    #[test]
    fn file_open_switch_depends_on_mode() {
        let probes = ProbeSwitches::default();
        let open = |mode| EventDetail::FileOpen {
            path: "/x".into(),
            mode,
        };
        assert!(!probes.enforces(&open(FileMode::Read)));
        assert!(probes.enforces(&open(FileMode::Write)));
        assert!(probes.enforces(&open(FileMode::ReadWrite)));
    }

    #[test]
    fn rejects_invalid_values() {
        assert!(matches!(
            EnforcementPolicy::parse("max_enforced_process_level = 0", Path::new("p")),
            Err(PolicyError::ZeroLevel)
        ));
        assert!(matches!(
            EnforcementPolicy::parse("audit_time_budget_ms = 0", Path::new("p")),
            Err(PolicyError::ZeroBudget)
        ));
        assert!(matches!(
            EnforcementPolicy::parse("[probes]\nptrace = true", Path::new("p")),
            Err(PolicyError::Parse { .. })
        ));
    }

    proptest! {
        #[test]
        fn canonical_rendering_is_a_fixed_point(
            level in 1u32..10,
            budget in 1u64..1_000_000,
            bits in any::<u16>(),
        ) {
            let b = |i: u16| bits & (1 << i) != 0;
            let policy = EnforcementPolicy {
                max_enforced_process_level: level,
                audit_time_budget_ms: budget,
                rule_file: None,
                probes: ProbeSwitches {
                    fork: b(0), exec: b(1), kill: b(2), exit: b(3),
                    file_open_read: b(4), file_open_write: b(5), file_remove: b(6),
                    file_rename: b(7), net_connect: b(8), net_listen: b(9),
                    net_accept: b(10), dns_resolve: b(11),
                },
            };
            let text = policy.render();
            let back = EnforcementPolicy::parse(&text, Path::new("p")).unwrap();
            prop_assert_eq!(&back, &policy);
            prop_assert_eq!(back.render(), text);
        }
    }
}
