//! Runtime security monitor for tool-executing agents.
//!
//! An instrumented agent talks to the monitor over the A2M protocol
//! ([`a2m`]), reporting its chat messages and every imminent tool use. The
//! monitor traces OS-level operations issued by the agent's process tree
//! ([`tracer`]), suspends sensitive ones, audits them against the task
//! context ([`auditor`]) and resumes or terminates the originating process.
//! [`monitor`] wires those pieces together per session and [`scenario`]
//! replays recorded bundles through the full stack deterministically.

pub mod a2m;
pub mod auditor;
pub mod cli;
pub mod clock;
pub mod model;
pub mod monitor;
pub mod scenario;
pub mod tracer;

pub use model::{
    apply_sec_ctx, is_safe_action, Action, ActionKind, AgentBasicInfo, EnforcementOutcome,
    Message, OpVerdict, Role, TaskContext, Verdict, ALERT_PREFIX,
};
