//! Task-context summarization.
//!
//! The summarizer folds newly arrived chat messages into the running task
//! summary and reports whether the user moved on to a different task.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Message, Role, TaskContext};

pub const SUMMARY_LIMIT: usize = 2000;
pub const EMPTY_SUMMARY: &str = "(no user task stated)";

#[derive(Debug, Error)]
#[error("summarizer failed: {0}")]
pub struct SummarizeError(pub String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryUpdate {
    pub summary: String,
    pub changed: bool,
}

pub trait Summarizer: Send {
    /// `ctx.messages` already ends with `new_msgs`.
    fn summarize(&mut self, ctx: &TaskContext, new_msgs: &[Message]) -> Result<SummaryUpdate, SummarizeError>;
}

/// Deterministic summarizer: the summary is the user messages of the
/// current task joined by newlines, and a task is identified by the hash of
/// the first message of the latest contiguous run of user messages.
#[derive(Debug, Default)]
pub struct StubSummarizer {
    task_hash: Option<[u8; 32]>,
}

impl StubSummarizer {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Index of the first message of the latest contiguous block of user
/// messages.
fn latest_user_block(messages: &[Message]) -> Option<usize> {
    let last = messages.iter().rposition(|m| m.role == Role::User)?;
    let mut start = last;
    while start > 0 && messages[start - 1].role == Role::User {
        start -= 1;
    }
    Some(start)
}

fn truncate_chars(mut s: String, limit: usize) -> String {
    if let Some((idx, _)) = s.char_indices().nth(limit) {
        s.truncate(idx);
    }
    s
}

impl Summarizer for StubSummarizer {
    fn summarize(&mut self, ctx: &TaskContext, new_msgs: &[Message]) -> Result<SummaryUpdate, SummarizeError> {
        let Some(start) = latest_user_block(&ctx.messages) else {
            let summary = if ctx.summary.is_empty() {
                EMPTY_SUMMARY.to_string()
            } else {
                ctx.summary.clone()
            };
            return Ok(SummaryUpdate {
                summary,
                changed: false,
            });
        };
        let hash: [u8; 32] = Sha256::digest(ctx.messages[start].content.as_bytes()).into();
        let changed = self.task_hash != Some(hash);
        self.task_hash = Some(hash);

        let user_texts = |msgs: &[Message]| -> Vec<String> {
            msgs.iter()
                .filter(|m| m.role == Role::User)
                .map(|m| m.content.clone())
                .collect()
        };
        let mut parts = if changed {
            user_texts(&ctx.messages[start..])
        } else {
            let mut prior = Vec::new();
            if !ctx.summary.is_empty() && ctx.summary != EMPTY_SUMMARY {
                prior.push(ctx.summary.clone());
            }
            prior.extend(user_texts(new_msgs));
            prior
        };
        parts.retain(|p| !p.is_empty());
        let summary = if parts.is_empty() {
            EMPTY_SUMMARY.to_string()
        } else {
            truncate_chars(parts.join("\n"), SUMMARY_LIMIT)
        };
        Ok(SummaryUpdate { summary, changed })
    }
}

/// Appends `msgs` to `ctx` and runs the summarizer. On failure the prior
/// summary is kept and the task is treated as unchanged.
pub fn apply(summarizer: &mut dyn Summarizer, ctx: &mut TaskContext, msgs: Vec<Message>) -> bool {
    let start = ctx.messages.len();
    ctx.messages.extend(msgs);
    match summarizer.summarize(ctx, &ctx.messages[start..]) {
        Ok(update) => {
            ctx.summary = update.summary;
            ctx.changed = update.changed;
            if update.changed {
                ctx.task_epoch += 1;
            }
        }
        Err(e) => {
            tracing::warn!(error = %e, "keeping prior task summary");
            ctx.changed = false;
        }
    }
    ctx.changed
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(role: Role, text: &str, seq: u64) -> Message {
        Message::new(role, text, seq)
    }

    #[test]
    fn first_summary_is_a_task_change() {
        let mut s = StubSummarizer::new();
        let mut ctx = TaskContext::default();
        assert!(apply(&mut s, &mut ctx, vec![msg(Role::User, "summarize /var/log", 0)]));
        assert_eq!(ctx.summary, "summarize /var/log");
        assert_eq!(ctx.task_epoch, 1);
    }

    #[test]
    fn tool_results_keep_the_task() {
        let mut s = StubSummarizer::new();
        let mut ctx = TaskContext::default();
        apply(&mut s, &mut ctx, vec![msg(Role::User, "task A", 0), msg(Role::Agent, "ok", 1)]);
        let changed = apply(&mut s, &mut ctx, vec![msg(Role::ToolResult, "file contents", 2)]);
        assert!(!changed);
        assert_eq!(ctx.summary, "task A");
        assert_eq!(ctx.task_epoch, 1);
    }

    #[test]
    fn new_user_block_restarts_summary() {
        let mut s = StubSummarizer::new();
        let mut ctx = TaskContext::default();
        apply(&mut s, &mut ctx, vec![msg(Role::User, "task A", 0), msg(Role::Agent, "done", 1)]);
        let changed = apply(
            &mut s,
            &mut ctx,
            vec![msg(Role::User, "task B", 2), msg(Role::User, "details", 3)],
        );
        assert!(changed);
        assert_eq!(ctx.summary, "task B\ndetails");
        assert_eq!(ctx.task_epoch, 2);
    }

    #[test]
    fn empty_context_gets_placeholder() {
        let mut s = StubSummarizer::new();
        let mut ctx = TaskContext::default();
        assert!(!apply(&mut s, &mut ctx, Vec::new()));
        assert_eq!(ctx.summary, EMPTY_SUMMARY);
    }

    #[test]
    fn summary_is_capped() {
        let mut s = StubSummarizer::new();
        let mut ctx = TaskContext::default();
        apply(&mut s, &mut ctx, vec![msg(Role::User, &"é".repeat(5000), 0)]);
        assert_eq!(ctx.summary.chars().count(), SUMMARY_LIMIT);
    }

    struct Broken;
    impl Summarizer for Broken {
        fn summarize(&mut self, _: &TaskContext, _: &[Message]) -> Result<SummaryUpdate, SummarizeError> {
            Err(SummarizeError("offline".into()))
        }
    }

    #[test]
    fn failure_keeps_prior_summary() {
        let mut ctx = TaskContext {
            summary: "old".into(),
            task_epoch: 3,
            changed: true,
            ..Default::default()
        };
        assert!(!apply(&mut Broken, &mut ctx, vec![msg(Role::User, "new", 0)]));
        assert_eq!(ctx.summary, "old");
        assert_eq!(ctx.task_epoch, 3);
        assert_eq!(ctx.messages.len(), 1);
    }
}
