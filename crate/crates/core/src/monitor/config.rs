//! Monitor configuration file.
//!
//! ```toml
//! listen_addr = "127.0.0.1:7474"
//! policy_file = "policy.toml"
//! rule_file = "rules.toml"          # optional, overrides the policy's
//! log_dir = "logs"                  # optional, no files without it
//! hello_timeout_ms = 5000
//! trace_source = { replay = "trace.jsonl" }     # or "os"
//! auditor = { stub = "stub.jsonl" }
//! # auditor = { remote = { endpoint = "http://127.0.0.1:8080/audit", key_env = "AUDITOR_API_KEY" } }
//! # auditor = "disabled"
//! ```
//!
//! Relative paths are resolved against the config file's directory.
//! Credentials for the remote auditor are read from the named environment
//! variable, never from the file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::a2m::hello::DEFAULT_HELLO_TIMEOUT;
use crate::a2m::DEFAULT_LISTEN_ADDR;
use crate::auditor::backend::DEFAULT_MODEL_TIMEOUT;
use crate::auditor::rules::{parse_rules, Rule, RuleError};
use crate::tracer::policy::PolicyError;
use crate::tracer::EnforcementPolicy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("rule file {path}: {source}")]
    Rules {
        path: PathBuf,
        #[source]
        source: RuleError,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSourceConfig {
    Replay(PathBuf),
    Os,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_env: Option<String>,
    #[serde(default = "default_model_timeout")]
    pub timeout_secs: u64,
}

fn default_model_timeout() -> u64 {
    DEFAULT_MODEL_TIMEOUT.as_secs()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditorConfig {
    Stub(PathBuf),
    Remote(RemoteConfig),
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    #[serde(default = "default_listen")]
    pub listen_addr: String,
    pub policy_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_dir: Option<PathBuf>,
    #[serde(default = "default_hello_timeout")]
    pub hello_timeout_ms: u64,
    pub trace_source: TraceSourceConfig,
    pub auditor: AuditorConfig,
}

fn default_listen() -> String {
    DEFAULT_LISTEN_ADDR.to_string()
}

fn default_hello_timeout() -> u64 {
    DEFAULT_HELLO_TIMEOUT.as_millis() as u64
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl MonitorConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        if cfg.hello_timeout_ms == 0 {
            return Err(ConfigError::Invalid("hello_timeout_ms must be > 0".into()));
        }
        if let AuditorConfig::Remote(r) = &cfg.auditor {
            if r.timeout_secs == 0 {
                return Err(ConfigError::Invalid("auditor timeout_secs must be > 0".into()));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.policy_file);
        if let Some(p) = &mut cfg.rule_file {
            resolve(base, p);
        }
        if let Some(p) = &mut cfg.log_dir {
            resolve(base, p);
        }
        if let TraceSourceConfig::Replay(p) = &mut cfg.trace_source {
            resolve(base, p);
        }
        if let AuditorConfig::Stub(p) = &mut cfg.auditor {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn hello_timeout(&self) -> Duration {
        Duration::from_millis(self.hello_timeout_ms)
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Loads a rule file, or returns no user rules when `path` is `None`.
pub fn load_rules(path: Option<&Path>) -> Result<Vec<Rule>, ConfigError> {
    let Some(path) = path else {
        return Ok(Vec::new());
    };
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_rules(&text).map_err(|source| ConfigError::Rules {
        path: path.to_path_buf(),
        source,
    })
}

/// Everything the monitor needs from disk, validated.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: MonitorConfig,
    pub policy: EnforcementPolicy,
    pub rules: Vec<Rule>,
    pub rule_file: Option<PathBuf>,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let config = MonitorConfig::load(path)?;
        let policy = EnforcementPolicy::load(&config.policy_file)?;
        let rule_file = config.rule_file.clone().or_else(|| policy.rule_file.clone());
        let rules = load_rules(rule_file.as_deref())?;
        Ok(Self {
            config,
            policy,
            rules,
            rule_file,
        })
    }
}
