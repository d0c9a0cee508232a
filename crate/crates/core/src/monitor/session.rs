//! Server side of one protocol session, without any I/O.
//!
//! [`ServerSession`] consumes decoded frames and produces reply frames. The
//! first frame must be a hello; after that every frame is a request. Any
//! protocol violation produces a `protocol_error` reply and closes the
//! session. Closing never stops auditing of events already captured: the
//! session's pipeline drains its queue and keeps logging.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use crate::a2m::hello::accept_hello;
use crate::a2m::{step_status, ClientRequest, RequestBody, ServerResponse, ServerStatus};
use crate::auditor::AuditInput;
use crate::clock::SharedClock;
use crate::model::{Action, AgentBasicInfo, EnforcementOutcome, TaskContext};

/// Session state shared between the protocol handler and the pipeline.
#[derive(Debug, Default)]
pub struct SessionState {
    pub nonce: String,
    pub status: ServerStatus,
    pub agent_info: Option<AgentBasicInfo>,
    /// Every message the agent reported, plus the latest summary.
    pub task_ctx: TaskContext,
    /// Messages not yet folded into the summary.
    pub pending: AuditInput,
    /// Number of tool-use notifications; the pipeline opens tracer epochs
    /// until it catches up.
    pub requested_epoch: u64,
    pub last_enforcement: Option<EnforcementOutcome>,
    /// Actions exactly as the agent reported them.
    pub actions: Vec<Action>,
    pub alerts_delivered: u64,
    pub closed: bool,
    pub close_reason: Option<String>,
}

pub type SharedState = Arc<Mutex<SessionState>>;

pub fn lock(state: &SharedState) -> MutexGuard<'_, SessionState> {
    state.lock().unwrap_or_else(|p| p.into_inner())
}

/// Builds and starts the tracer and auditor for a session that switched on
/// tracing.
pub trait SessionHost: Send + Sync {
    fn start_tracing(&self, info: &AgentBasicInfo, state: &SharedState) -> Result<(), String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    AwaitHello,
    Open,
    Closed,
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct Reply {
    pub frame: Option<Vec<u8>>,
    pub close: bool,
}

pub struct ServerSession {
    phase: Phase,
    started: Duration,
    hello_timeout: Duration,
    clock: SharedClock,
    last_request_id: Option<u64>,
    state: SharedState,
    host: Arc<dyn SessionHost>,
}

impl ServerSession {
    pub fn new(host: Arc<dyn SessionHost>, clock: SharedClock, hello_timeout: Duration) -> Self {
        Self {
            phase: Phase::AwaitHello,
            started: clock.now(),
            hello_timeout,
            clock,
            last_request_id: None,
            state: Arc::new(Mutex::new(SessionState::default())),
            host,
        }
    }

    pub fn state(&self) -> &SharedState {
        &self.state
    }

    pub fn is_closed(&self) -> bool {
        self.phase == Phase::Closed
    }

    pub fn status(&self) -> ServerStatus {
        lock(&self.state).status
    }

    /// True once the hello deadline has passed without a hello; the
    /// session is closed at that point.
    pub fn hello_expired(&mut self) -> bool {
        if self.phase == Phase::AwaitHello
            && self.clock.now().saturating_sub(self.started) >= self.hello_timeout
        {
            self.close(format!("no hello within {:?}", self.hello_timeout));
            return true;
        }
        false
    }

    /// The transport went away.
    pub fn disconnected(&mut self) {
        if self.phase != Phase::Closed {
            self.close("peer disconnected".into());
        }
    }

    fn close(&mut self, reason: String) {
        self.phase = Phase::Closed;
        let mut st = lock(&self.state);
        if !st.closed {
            tracing::info!(nonce = %st.nonce, %reason, "session closed");
            st.closed = true;
            st.close_reason = Some(reason);
        }
    }

    fn fail(&mut self, request_id: u64, message: String) -> Reply {
        let resp = ServerResponse::protocol_error(request_id, message.clone());
        self.close(format!("protocol error: {message}"));
        Reply {
            frame: Some(resp.to_bytes()),
            close: true,
        }
    }

    pub fn handle_frame(&mut self, frame: &[u8]) -> Reply {
        match self.phase {
            Phase::Closed => Reply {
                frame: None,
                close: true,
            },
            Phase::AwaitHello => {
                if self.hello_expired() {
                    return Reply {
                        frame: None,
                        close: true,
                    };
                }
                let (reply, result) = accept_hello(frame);
                match result {
                    Ok(nonce) => {
                        lock(&self.state).nonce = nonce;
                        self.phase = Phase::Open;
                        Reply {
                            frame: Some(reply.to_bytes()),
                            close: false,
                        }
                    }
                    Err(e) => {
                        self.close(format!("handshake failed: {e}"));
                        Reply {
                            frame: Some(reply.to_bytes()),
                            close: true,
                        }
                    }
                }
            }
            Phase::Open => self.handle_request(frame),
        }
    }

    fn handle_request(&mut self, frame: &[u8]) -> Reply {
        let req = match ClientRequest::parse(frame) {
            Ok(r) => r,
            Err(e) => {
                let id = serde_json::from_slice::<serde_json::Value>(frame)
                    .ok()
                    .and_then(|v| v.get("request_id").and_then(|i| i.as_u64()))
                    .unwrap_or(0);
                return self.fail(id, format!("malformed request: {e}"));
            }
        };
        let id = req.request_id;
        if self.last_request_id.is_some_and(|last| id <= last) {
            return self.fail(id, "request_id must be strictly increasing".into());
        }
        self.last_request_id = Some(id);

        let status = self.status();
        let (next, accept) = step_status(status, req.operand);
        if !accept {
            return self.fail(id, format!("{:?} not allowed in status {:?}", req.operand, status));
        }
        let body = match req.body() {
            Ok(b) => b,
            Err(e) => return self.fail(id, e.to_string()),
        };

        let response = match body {
            RequestBody::Connect(mut info) => {
                let mut st = lock(&self.state);
                if info.session_nonce.is_empty() {
                    info.session_nonce = st.nonce.clone();
                } else if info.session_nonce != st.nonce {
                    drop(st);
                    return self.fail(id, "session_nonce does not match the handshake".into());
                }
                st.agent_info = Some(info);
                st.status = next;
                ServerResponse::ok(id)
            }
            RequestBody::StartPassiveTracing => {
                let info = lock(&self.state).agent_info.clone().expect("connected session has agent info");
                if let Err(e) = self.host.start_tracing(&info, &self.state) {
                    return self.fail(id, format!("cannot start tracing: {e}"));
                }
                lock(&self.state).status = next;
                ServerResponse::ok(id)
            }
            RequestBody::SendNewToolUse(batch) => {
                let mut st = lock(&self.state);
                let last_seq = st.task_ctx.messages.last().map(|m| m.seq);
                if let (Some(last), Some(first)) = (last_seq, batch.messages.first()) {
                    if first.seq <= last {
                        drop(st);
                        return self.fail(id, "message seq must keep increasing across batches".into());
                    }
                }
                st.task_ctx.messages.extend(batch.messages.iter().cloned());
                st.pending.msgs.extend(batch.messages);
                st.pending.has_new_tool_use = true;
                st.requested_epoch += 1;
                st.last_enforcement = None;
                st.actions.push(batch.action);
                ServerResponse::ok(id)
            }
            RequestBody::GetEnforcementInfo => {
                let mut st = lock(&self.state);
                match st.last_enforcement.take() {
                    Some(outcome) => {
                        st.alerts_delivered += 1;
                        ServerResponse::alert(id, outcome)
                    }
                    None => ServerResponse::ok(id),
                }
            }
        };
        Reply {
            frame: Some(response.to_bytes()),
            close: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::a2m::{Hello, Operand, ResultCode};
    use crate::clock::{Clock, ManualClock};
    use crate::model::{Message, Role};
    use serde_json::json;

    #[derive(Default)]
    struct NullHost;
    impl SessionHost for NullHost {
        fn start_tracing(&self, _: &AgentBasicInfo, _: &SharedState) -> Result<(), String> {
            Ok(())
        }
    }

    fn session() -> (ServerSession, Arc<ManualClock>) {
        let clock = ManualClock::shared();
        let s = ServerSession::new(Arc::new(NullHost), clock.clone(), Duration::from_secs(5));
        (s, clock)
    }

    fn req(id: u64, op: Operand, data: serde_json::Value) -> Vec<u8> {
        ClientRequest::new(id, op, data).to_bytes()
    }

    fn resp(r: &Reply) -> ServerResponse {
        ServerResponse::parse(r.frame.as_ref().unwrap()).unwrap()
    }

    fn tracing_session() -> ServerSession {
        let (mut s, _) = session();
        s.handle_frame(&Hello::new("ab12").to_bytes());
        let r = s.handle_frame(&req(1, Operand::Connect, json!({"agent_process_id": 10})));
        assert_eq!(resp(&r).result, ResultCode::Ok);
        let r = s.handle_frame(&req(2, Operand::StartPassiveTracing, json!(null)));
        assert_eq!(resp(&r).result, ResultCode::Ok);
        assert_eq!(s.status(), ServerStatus::Tracing);
        s
    }

    #[test]
    fn happy_path_and_alert_delivery() {
        let mut s = tracing_session();
        let batch = json!({
            "messages": [
                {"role": "user", "content": "a", "seq": 0},
                {"role": "agent", "content": "b", "seq": 1},
                {"role": "tool_result", "content": "c", "seq": 2}
            ],
            "action": {"kind": "tool_use", "tool_name": "bash", "tool_input": {"command": "ls"}}
        });
        let r = s.handle_frame(&req(3, Operand::SendNewToolUse, batch));
        assert_eq!(resp(&r).result, ResultCode::Ok);
        {
            let st = lock(s.state());
            assert_eq!(st.task_ctx.messages.len(), 3);
            assert_eq!(st.requested_epoch, 1);
            assert_eq!(st.actions[0].tool_input, json!({"command": "ls"}));
        }
        lock(s.state()).last_enforcement = Some(EnforcementOutcome::terminate("blocked"));
        let r = s.handle_frame(&req(4, Operand::GetEnforcementInfo, json!(null)));
        assert_eq!(resp(&r).result, ResultCode::AlertPending);
        let r = s.handle_frame(&req(5, Operand::GetEnforcementInfo, json!(null)));
        assert_eq!(resp(&r).result, ResultCode::Ok);
        assert!(resp(&r).payload.is_none());
    }

    #[test]
    fn empty_batch_still_opens_an_epoch() {
        let mut s = tracing_session();
        let batch = json!({"messages": [], "action": {"kind": "tool_use", "tool_name": "bash"}});
        let r = s.handle_frame(&req(3, Operand::SendNewToolUse, batch));
        assert_eq!(resp(&r).result, ResultCode::Ok);
        let st = lock(s.state());
        assert_eq!(st.requested_epoch, 1);
        assert!(st.task_ctx.messages.is_empty());
    }

    #[test]
    fn operand_out_of_order_closes() {
        let (mut s, _) = session();
        s.handle_frame(&Hello::new("ab").to_bytes());
        let r = s.handle_frame(&req(1, Operand::SendNewToolUse, json!({})));
        assert!(r.close);
        assert_eq!(resp(&r).result, ResultCode::ProtocolError);
        assert_eq!(resp(&r).request_id, 1);
        assert!(s.is_closed());
        assert!(lock(s.state()).closed);
        assert_eq!(s.handle_frame(b"{}"), Reply { frame: None, close: true });
    }

    #[test]
    fn tracing_survives_everything_but_close() {
        let mut s = tracing_session();
        for (i, op) in Operand::ALL.into_iter().enumerate() {
            let mut t = tracing_session();
            t.handle_frame(&req(10 + i as u64, op, json!({"junk": true})));
            assert_eq!(t.status(), ServerStatus::Tracing);
        }
        s.handle_frame(b"not json");
        assert_eq!(s.status(), ServerStatus::Tracing);
        assert!(s.is_closed());
    }

    #[test]
    fn request_ids_must_increase() {
        let (mut s, _) = session();
        s.handle_frame(&Hello::new("ab").to_bytes());
        s.handle_frame(&req(5, Operand::Connect, json!({"agent_process_id": 10})));
        let r = s.handle_frame(&req(5, Operand::StartPassiveTracing, json!(null)));
        assert_eq!(resp(&r).result, ResultCode::ProtocolError);
        assert_eq!(s.status(), ServerStatus::Connected);
    }

    #[test]
    fn connect_nonce_must_match_hello() {
        let (mut s, _) = session();
        s.handle_frame(&Hello::new("ab").to_bytes());
        let r = s.handle_frame(&req(
            1,
            Operand::Connect,
            json!({"agent_process_id": 10, "session_nonce": "cd"}),
        ));
        assert_eq!(resp(&r).result, ResultCode::ProtocolError);
        assert_eq!(s.status(), ServerStatus::Fresh);
    }

    #[test]
    fn version_mismatch_closes() {
        let (mut s, _) = session();
        let r = s.handle_frame(&Hello::with_version("ab", 2).to_bytes());
        assert!(r.close);
        let reply = Hello::parse(r.frame.as_ref().unwrap()).unwrap();
        assert!(reply.error.is_some());
        assert_eq!(reply.version, 1);
    }

    #[test]
    fn hello_deadline_uses_the_clock() {
        let (mut s, clock) = session();
        clock.advance(Duration::from_millis(4999));
        assert!(!s.hello_expired());
        clock.advance(Duration::from_millis(1));
        assert!(s.hello_expired());
        assert!(s.is_closed());
        assert_eq!(clock.now(), Duration::from_secs(5));
    }

    #[test]
    fn message_seq_must_keep_increasing() {
        let mut s = tracing_session();
        let batch = |seq| {
            json!({"messages": [{"role": "user", "content": "x", "seq": seq}], "action": {"kind": "plain_message"}})
        };
        assert_eq!(resp(&s.handle_frame(&req(3, Operand::SendNewToolUse, batch(4)))).result, ResultCode::Ok);
        let r = s.handle_frame(&req(4, Operand::SendNewToolUse, batch(4)));
        assert_eq!(resp(&r).result, ResultCode::ProtocolError);
        let _ = Message::new(Role::User, "", 0);
    }
}
