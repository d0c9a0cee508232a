//! In-memory transport that feeds frames straight into a [`ServerSession`].
//!
//! Bytes still go through the real framing code in both directions, so the
//! only thing skipped is the socket.

use std::collections::VecDeque;
use std::io;

use super::session::ServerSession;
use crate::a2m::frame::{encode_frame, FrameDecoder};
use crate::a2m::{Transport, MAX_FRAME_LEN};

pub struct LoopbackTransport {
    session: ServerSession,
    inbound: FrameDecoder,
    outbound: FrameDecoder,
    replies: VecDeque<Vec<u8>>,
}

fn invalid(e: impl std::error::Error + Send + Sync + 'static) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e)
}

impl LoopbackTransport {
    pub fn new(session: ServerSession) -> Self {
        Self {
            session,
            inbound: FrameDecoder::new(MAX_FRAME_LEN),
            outbound: FrameDecoder::new(MAX_FRAME_LEN),
            replies: VecDeque::new(),
        }
    }

    pub fn session(&self) -> &ServerSession {
        &self.session
    }

    pub fn session_mut(&mut self) -> &mut ServerSession {
        &mut self.session
    }
}

impl Transport for LoopbackTransport {
    fn send(&mut self, payload: &[u8]) -> io::Result<()> {
        if self.session.is_closed() {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "session closed"));
        }
        self.inbound.push(&encode_frame(payload).map_err(invalid)?);
        while let Some(frame) = self.inbound.next_frame().map_err(invalid)? {
            let reply = self.session.handle_frame(&frame);
            if let Some(bytes) = reply.frame {
                self.outbound.push(&encode_frame(&bytes).map_err(invalid)?);
                while let Some(out) = self.outbound.next_frame().map_err(invalid)? {
                    self.replies.push_back(out);
                }
            }
        }
        Ok(())
    }

    fn recv(&mut self) -> io::Result<Vec<u8>> {
        self.replies
            .pop_front()
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "server closed"))
    }
}
