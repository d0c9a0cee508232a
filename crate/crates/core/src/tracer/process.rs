use std::net::IpAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::event::FileMode;

const SHELLS: [&str; 4] = ["sh", "bash", "dash", "zsh"];

pub fn is_shell(executable: &str) -> bool {
    let base = executable.rsplit('/').next().unwrap_or(executable);
    SHELLS.contains(&base)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcState {
    Running,
    Suspended,
    Terminated,
    Exited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Outbound,
    Listen,
    Inbound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetOp {
    pub address: IpAddr,
    pub port: u16,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub pid: u32,
    pub parent_pid: Option<u32>,
    /// Agent main process is level 1, its children level 2, and so on.
    pub level: u32,
    pub executable: String,
    pub argv: Vec<String>,
    pub is_shell: bool,
    pub file_ops: Vec<(String, FileMode)>,
    pub net_ops: Vec<NetOp>,
    pub alive: bool,
    pub state: ProcState,
    pub audit_time_spent: Duration,
}

impl ProcessRecord {
    pub fn root(pid: u32, executable: impl Into<String>) -> Self {
        let executable = executable.into();
        Self {
            pid,
            parent_pid: None,
            level: 1,
            is_shell: is_shell(&executable),
            executable,
            argv: Vec::new(),
            file_ops: Vec::new(),
            net_ops: Vec::new(),
            alive: true,
            state: ProcState::Running,
            audit_time_spent: Duration::ZERO,
        }
    }

    /// A forked child starts as a copy of its parent's image one level down.
    pub fn child_of(parent: &ProcessRecord, pid: u32) -> Self {
        Self {
            pid,
            parent_pid: Some(parent.pid),
            level: parent.level + 1,
            executable: parent.executable.clone(),
            argv: parent.argv.clone(),
            is_shell: parent.is_shell,
            file_ops: Vec::new(),
            net_ops: Vec::new(),
            alive: true,
            state: ProcState::Running,
            audit_time_spent: Duration::ZERO,
        }
    }

    pub fn exec(&mut self, path: &str, argv: &[String]) {
        self.executable = path.to_string();
        self.argv = argv.to_vec();
        self.is_shell = is_shell(path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shell_detection_uses_basename() {
        for s in ["/bin/bash", "/usr/bin/zsh", "sh", "/bin/dash"] {
            assert!(is_shell(s), "{s}");
        }
        for s in ["/bin/cat", "/usr/bin/bash5", "/opt/fish", ""] {
            assert!(!is_shell(s), "{s}");
        }
    }

    #[test]
    fn child_is_one_level_down() {
        let root = ProcessRecord::root(100, "/usr/bin/python3");
        let child = ProcessRecord::child_of(&root, 101);
        assert_eq!(child.level, 2);
        assert_eq!(child.parent_pid, Some(100));
        assert_eq!(child.executable, "/usr/bin/python3");
    }
}
