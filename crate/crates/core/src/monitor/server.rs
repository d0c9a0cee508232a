//! TCP front end: accept loop, one thread per connection, and (in
//! [`PumpMode::Auto`]) one pump thread per traced session.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::pipeline::{SessionEnv, SessionSlot};
use super::session::{lock, ServerSession, SharedState};
use crate::a2m::frame::{write_frame, FrameDecoder};
use crate::a2m::{ServerResponse, MAX_FRAME_LEN};
use crate::clock::SharedClock;

const POLL_INTERVAL: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Who drives session pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PumpMode {
    /// A thread per session replays events paced by wall-clock time.
    Auto,
    /// The embedding code calls [`SessionSlot::with_pipeline`] itself.
    Manual,
}

#[derive(Clone)]
pub struct SessionHandle {
    pub state: SharedState,
    pub slot: Arc<SessionSlot>,
}

pub type Registry = Arc<Mutex<Vec<SessionHandle>>>;

pub struct Server {
    listener: TcpListener,
    env: Arc<SessionEnv>,
    hello_timeout: Duration,
    clock: SharedClock,
    mode: PumpMode,
    shutdown: Arc<AtomicBool>,
    sessions: Registry,
}

impl Server {
    pub fn bind(
        addr: &str,
        env: Arc<SessionEnv>,
        hello_timeout: Duration,
        clock: SharedClock,
        mode: PumpMode,
    ) -> Result<Self, ServerError> {
        let listener = TcpListener::bind(addr).map_err(|source| ServerError::Bind {
            addr: addr.to_string(),
            source,
        })?;
        listener.set_nonblocking(true)?;
        Ok(Self {
            listener,
            env,
            hello_timeout,
            clock,
            mode,
            shutdown: Arc::new(AtomicBool::new(false)),
            sessions: Arc::default(),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn shutdown_flag(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }

    pub fn sessions(&self) -> Registry {
        self.sessions.clone()
    }

    /// Serves until the shutdown flag is raised, then waits for every
    /// connection and pump thread to finish.
    pub fn run(self) -> Result<(), ServerError> {
        tracing::info!(addr = %self.local_addr(), "listening");
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !self.shutdown.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    tracing::info!(%peer, "connection accepted");
                    workers.extend(self.spawn_session(stream)?);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL_INTERVAL),
                Err(e) => tracing::warn!(error = %e, "accept failed"),
            }
            workers.retain(|w| !w.is_finished());
        }
        tracing::info!("shutting down");
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }

    /// Runs the server on a background thread.
    pub fn spawn(self) -> RunningServer {
        let addr = self.local_addr();
        let shutdown = self.shutdown.clone();
        let sessions = self.sessions.clone();
        let join = thread::spawn(move || {
            if let Err(e) = self.run() {
                tracing::error!(error = %e, "server failed");
            }
        });
        RunningServer {
            addr,
            shutdown,
            sessions,
            join: Some(join),
        }
    }

    fn spawn_session(&self, stream: TcpStream) -> io::Result<Vec<JoinHandle<()>>> {
        stream.set_nonblocking(false)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(POLL_INTERVAL))?;
        let slot = SessionSlot::new(self.env.clone());
        let session = ServerSession::new(slot.clone(), self.clock.clone(), self.hello_timeout);
        let handle = SessionHandle {
            state: session.state().clone(),
            slot: slot.clone(),
        };
        lock_registry(&self.sessions).push(handle.clone());

        let mut threads = Vec::new();
        let shutdown = self.shutdown.clone();
        threads.push(thread::spawn(move || serve_connection(stream, session, &shutdown)));
        if self.mode == PumpMode::Auto {
            let shutdown = self.shutdown.clone();
            threads.push(thread::spawn(move || auto_pump(&handle, &shutdown)));
        }
        Ok(threads)
    }
}

fn lock_registry(r: &Registry) -> std::sync::MutexGuard<'_, Vec<SessionHandle>> {
    r.lock().unwrap_or_else(|p| p.into_inner())
}

pub struct RunningServer {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    sessions: Registry,
    join: Option<JoinHandle<()>>,
}

impl RunningServer {
    pub fn sessions(&self) -> Vec<SessionHandle> {
        lock_registry(&self.sessions).clone()
    }

    /// Raises the shutdown flag and waits for the server to stop.
    pub fn stop(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

fn serve_connection(mut stream: TcpStream, mut session: ServerSession, shutdown: &AtomicBool) {
    let mut decoder = FrameDecoder::new(MAX_FRAME_LEN);
    let mut buf = vec![0u8; 64 * 1024];
    'conn: loop {
        if shutdown.load(Ordering::SeqCst) {
            session.disconnected();
            break;
        }
        if session.hello_expired() {
            break;
        }
        match stream.read(&mut buf) {
            Ok(0) => {
                session.disconnected();
                break;
            }
            Ok(n) => decoder.push(&buf[..n]),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => {
                tracing::debug!(error = %e, "read failed");
                session.disconnected();
                break;
            }
        }
        loop {
            let frame = match decoder.next_frame() {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) => {
                    let resp = ServerResponse::protocol_error(0, format!("bad frame: {e}"));
                    let _ = write_frame(&mut stream, &resp.to_bytes());
                    session.disconnected();
                    break 'conn;
                }
            };
            let reply = session.handle_frame(&frame);
            if let Some(bytes) = reply.frame {
                if let Err(e) = write_frame(&mut stream, &bytes) {
                    tracing::debug!(error = %e, "write failed");
                    session.disconnected();
                    break 'conn;
                }
            }
            if reply.close {
                break 'conn;
            }
        }
    }
    let _ = stream.flush();
    let _ = stream.shutdown(Shutdown::Both);
}

/// Paces the replay by wall-clock time since tracing started and keeps
/// auditing after the connection goes away, until the trace is exhausted.
fn auto_pump(handle: &SessionHandle, shutdown: &AtomicBool) {
    let mut started: Option<(Instant, u64)> = None;
    loop {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        let closed = lock(&handle.state).closed;
        let done = handle.slot.with_pipeline(|p| {
            let (t0, origin) = *started.get_or_insert_with(|| (Instant::now(), p.tracer().source().origin().unwrap_or(0)));
            let until = origin.saturating_add(t0.elapsed().as_millis() as u64);
            p.pump(Some(until));
            p.source_exhausted() && p.is_quiescent()
        });
        match done {
            Some(true) if closed => break,
            None if closed => break,
            _ => thread::sleep(POLL_INTERVAL),
        }
    }
}
