//! Agent-to-Monitor protocol.
//!
//! A connection starts with a SayHello exchange ([`hello`]), after which the
//! agent drives a strict request/response loop of length-prefixed JSON
//! frames ([`frame`], [`message`]). The server tracks a monotone status
//! ([`status`]): `connect` must come first, `start_passive_tracing` second,
//! and nothing ever turns tracing back off.

pub mod client;
pub mod frame;
pub mod hello;
pub mod message;
pub mod status;

pub use client::{Client, ClientError, TcpTransport, Transport};
pub use frame::{encode_frame, read_frame, write_frame, FrameDecoder, FrameError, MAX_FRAME_LEN};
pub use hello::{Hello, HelloError, MAGIC, PROTOCOL_VERSION};
pub use message::{ClientRequest, RequestBody, ResultCode, ServerResponse, ToolUseBatch};
pub use status::{step_status, Operand, ServerStatus};

pub const DEFAULT_LISTEN_ADDR: &str = "127.0.0.1:7474";
