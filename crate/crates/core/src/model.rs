//! Shared domain types and the safety contract every other module is
//! checked against.
//!
//! The framework never rewrites an agent's action. Its only influence on the
//! agent is a security alert appended to the task context after an
//! operation was terminated, and effects committed before termination are
//! left in place.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed prefix of every alert delivered to the agent.
pub const ALERT_PREFIX: &str = "SECURITY ALERT:";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("agent_process_id must be > 0")]
    ZeroPid,
    #[error("dependent file {0:?} is not an absolute path")]
    RelativeDependentFile(String),
    #[error("tool_use action requires a non-empty tool_name")]
    MissingToolName,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentBasicInfo {
    pub agent_process_id: u32,
    #[serde(default)]
    pub dependent_files: Vec<String>,
    #[serde(default)]
    pub agent_name: String,
    #[serde(default)]
    pub session_nonce: String,
}

impl AgentBasicInfo {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.agent_process_id == 0 {
            return Err(ModelError::ZeroPid);
        }
        if let Some(bad) = self.dependent_files.iter().find(|p| !p.starts_with('/')) {
            return Err(ModelError::RelativeDependentFile(bad.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Agent,
    ToolResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    pub seq: u64,
    #[serde(default)]
    pub is_tool_error: bool,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>, seq: u64) -> Self {
        Self {
            role,
            content: content.into(),
            seq,
            is_tool_error: false,
        }
    }

    pub fn tool_error(content: impl Into<String>, seq: u64) -> Self {
        Self {
            role: Role::ToolResult,
            content: content.into(),
            seq,
            is_tool_error: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskContext {
    pub messages: Vec<Message>,
    pub summary: String,
    pub task_epoch: u64,
    pub changed: bool,
}

impl TaskContext {
    pub fn next_seq(&self) -> u64 {
        self.messages.last().map_or(0, |m| m.seq + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    ToolUse,
    PlainMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    #[serde(default)]
    pub tool_input: serde_json::Value,
}

impl Action {
    pub fn tool_use(name: impl Into<String>, input: serde_json::Value) -> Self {
        Self {
            kind: ActionKind::ToolUse,
            tool_name: Some(name.into()),
            tool_input: input,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match (self.kind, self.tool_name.as_deref()) {
            (ActionKind::ToolUse, None | Some("")) => Err(ModelError::MissingToolName),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Resume,
    Terminate,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Resume => "resume",
            Verdict::Terminate => "terminate",
        }
    }
}

/// What the agent learns about an enforcement decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnforcementOutcome {
    pub verdict: Verdict,
    pub explanation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alert_text: Option<String>,
}

impl EnforcementOutcome {
    pub fn resume(explanation: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::Resume,
            explanation: explanation.into(),
            alert_text: None,
        }
    }

    pub fn terminate(explanation: impl Into<String>) -> Self {
        let explanation = explanation.into();
        Self {
            verdict: Verdict::Terminate,
            alert_text: Some(format!("{ALERT_PREFIX} {explanation}")),
            explanation,
        }
    }

    /// `alert_text` is present iff the verdict is terminate.
    pub fn is_consistent(&self) -> bool {
        self.alert_text.is_some() == (self.verdict == Verdict::Terminate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpVerdict {
    Safe,
    Unsafe,
}

/// An action is safe iff every operation it produced was judged safe.
pub fn is_safe_action(ops: &[OpVerdict]) -> bool {
    ops.iter().all(|v| *v == OpVerdict::Safe)
}

/// Appends `alert` to the context as an erroring tool result when the action
/// was judged unsafe. A safe verdict returns the context untouched.
pub fn apply_sec_ctx(action_verdict: bool, mut ctx: TaskContext, alert: &str) -> TaskContext {
    if !action_verdict {
        let seq = ctx.next_seq();
        ctx.messages.push(Message::tool_error(alert, seq));
    }
    ctx
}
