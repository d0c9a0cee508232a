//! Agent-side protocol client.

use std::io;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use super::frame::{read_frame, write_frame, FrameError, MAX_FRAME_LEN};
use super::hello::{check_reply, Hello, HelloError};
use super::message::{ClientRequest, PayloadError, ResultCode, ServerResponse, ToolUseBatch};
use super::status::{Operand, ServerStatus};
use crate::model::{Action, AgentBasicInfo, Message};

/// A bidirectional frame pipe. Implemented over TCP here and over an
/// in-memory loopback by the monitor.
pub trait Transport {
    fn send(&mut self, payload: &[u8]) -> io::Result<()>;
    fn recv(&mut self) -> io::Result<Vec<u8>>;
}

#[derive(Debug)]
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Self {
        Self { stream }
    }

    pub fn shutdown(&self) -> io::Result<()> {
        self.stream.shutdown(std::net::Shutdown::Both)
    }
}

fn frame_to_io(e: FrameError) -> io::Error {
    match e {
        FrameError::Io(e) => e,
        other => io::Error::new(io::ErrorKind::InvalidData, other),
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, payload: &[u8]) -> io::Result<()> {
        write_frame(&mut self.stream, payload).map_err(frame_to_io)
    }

    fn recv(&mut self) -> io::Result<Vec<u8>> {
        read_frame(&mut self.stream, MAX_FRAME_LEN)
            .map_err(frame_to_io)?
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "server closed"))
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("bad server descriptor {0:?}: expected host:port")]
    BadDescriptor(String),
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("handshake: {0}")]
    Handshake(#[from] HelloError),
    #[error("bad response: {0}")]
    Payload(#[from] PayloadError),
    #[error("response id {got} does not match request id {want}")]
    IdMismatch { want: u64, got: u64 },
    #[error("server reported protocol error: {0}")]
    Protocol(String),
}

/// Parses a `host:port` server descriptor.
pub fn parse_server_descriptor(desc: &str) -> Result<(String, u16), ClientError> {
    let bad = || ClientError::BadDescriptor(desc.to_string());
    let (host, port) = desc.rsplit_once(':').ok_or_else(bad)?;
    let host = host.trim_start_matches('[').trim_end_matches(']');
    if host.is_empty() || host.chars().any(char::is_whitespace) {
        return Err(bad());
    }
    let port: u16 = port.parse().map_err(|_| bad())?;
    Ok((host.to_string(), port))
}

pub fn resolve_descriptor(desc: &str) -> Result<SocketAddr, ClientError> {
    let (host, port) = parse_server_descriptor(desc)?;
    (host.as_str(), port)
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| ClientError::BadDescriptor(desc.to_string()))
}

pub struct Client<T: Transport> {
    transport: T,
    nonce: String,
    next_request_id: u64,
    status: ServerStatus,
}

impl Client<TcpTransport> {
    pub fn connect_tcp(desc: &str, nonce: &str, timeout: Duration) -> Result<Self, ClientError> {
        let addr = resolve_descriptor(desc)?;
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_nodelay(true)?;
        Client::handshake(TcpTransport::new(stream), Hello::new(nonce))
    }
}

impl<T: Transport> Client<T> {
    pub fn handshake(mut transport: T, hello: Hello) -> Result<Self, ClientError> {
        transport.send(&hello.to_bytes())?;
        let reply = transport.recv()?;
        check_reply(&hello, &reply)?;
        Ok(Self {
            transport,
            nonce: hello.nonce,
            next_request_id: 1,
            status: ServerStatus::Fresh,
        })
    }

    pub fn nonce(&self) -> &str {
        &self.nonce
    }

    /// Status as the client believes the server has it.
    pub fn status(&self) -> ServerStatus {
        self.status
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    /// Sends one request and returns the matching response. A
    /// `protocol_error` result is surfaced as [`ClientError::Protocol`].
    pub fn call(
        &mut self,
        operand: Operand,
        data: serde_json::Value,
    ) -> Result<ServerResponse, ClientError> {
        let req = ClientRequest::new(self.next_request_id, operand, data);
        self.next_request_id += 1;
        self.transport.send(&req.to_bytes())?;
        let resp = ServerResponse::parse(&self.transport.recv()?)?;
        if resp.result == ResultCode::ProtocolError {
            return Err(ClientError::Protocol(resp.message.unwrap_or_default()));
        }
        if resp.request_id != req.request_id {
            return Err(ClientError::IdMismatch {
                want: req.request_id,
                got: resp.request_id,
            });
        }
        self.status = super::status::step_status(self.status, operand).0;
        Ok(resp)
    }

    pub fn connect(&mut self, mut info: AgentBasicInfo) -> Result<ServerResponse, ClientError> {
        info.session_nonce = self.nonce.clone();
        let data = serde_json::to_value(info).expect("info serializes");
        self.call(Operand::Connect, data)
    }

    pub fn start_passive_tracing(&mut self) -> Result<ServerResponse, ClientError> {
        self.call(Operand::StartPassiveTracing, serde_json::Value::Null)
    }

    pub fn send_new_tool_use(
        &mut self,
        messages: Vec<Message>,
        action: Action,
    ) -> Result<ServerResponse, ClientError> {
        let data = serde_json::to_value(ToolUseBatch { messages, action }).expect("batch serializes");
        self.call(Operand::SendNewToolUse, data)
    }

    pub fn get_enforcement_info(&mut self) -> Result<ServerResponse, ClientError> {
        self.call(Operand::GetEnforcementInfo, serde_json::Value::Null)
    }
}
