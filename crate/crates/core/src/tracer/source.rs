//! Trace sources: where events come from and where stop/continue/kill
//! controls go.

use std::collections::{HashSet, VecDeque};
use std::io;
use std::path::Path;
use std::sync::mpsc::{Receiver, TryRecvError};

use super::event::{parse_trace_jsonl, EventDetail, RawEvent, TraceParseError};

/// Exit status reported for a process killed by the enforcer.
pub const KILLED_EXIT_STATUS: i32 = -9;

pub trait TraceSource: Send {
    /// Next deliverable event with `timestamp <= until` (or any timestamp
    /// when `until` is `None`). Events of suspended processes are held back.
    fn next_event(&mut self, until: Option<u64>) -> Option<RawEvent>;
    fn suspend(&mut self, pid: u32) -> io::Result<()>;
    fn resume(&mut self, pid: u32) -> io::Result<()>;
    fn terminate(&mut self, pid: u32) -> io::Result<()>;
    /// True once no further events can ever be delivered.
    fn is_exhausted(&self) -> bool;
    /// Timestamp of the first event, for sources that pace by wall clock.
    fn origin(&self) -> Option<u64> {
        None
    }
}

/// Deterministic source over a recorded event list.
///
/// A suspended pid's events stay queued in place while other pids' events
/// pass them. Terminating a pid drops everything it still had queued except
/// an exit event, which is synthesized if the recording has none.
#[derive(Debug, Default)]
pub struct ReplaySource {
    pending: VecDeque<RawEvent>,
    suspended: HashSet<u32>,
    terminated: HashSet<u32>,
    last_timestamp: u64,
    origin: Option<u64>,
    synthesized: Vec<RawEvent>,
}

impl ReplaySource {
    pub fn new(events: Vec<RawEvent>) -> Self {
        let origin = events.first().map(|e| e.timestamp);
        Self {
            pending: events.into(),
            origin,
            ..Default::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, ReplayLoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| ReplayLoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::new(parse_trace_jsonl(&text)?))
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_suspended(&self, pid: u32) -> bool {
        self.suspended.contains(&pid)
    }

    /// Events the source made up itself. Only ever exit events.
    pub fn synthesized(&self) -> &[RawEvent] {
        &self.synthesized
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayLoadError {
    #[error("cannot read trace file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("trace file: {0}")]
    Parse(#[from] TraceParseError),
}

impl TraceSource for ReplaySource {
    fn next_event(&mut self, until: Option<u64>) -> Option<RawEvent> {
        let mut i = 0;
        while i < self.pending.len() {
            let ev = &self.pending[i];
            if until.is_some_and(|u| ev.timestamp > u) {
                return None;
            }
            if self.suspended.contains(&ev.pid) {
                i += 1;
                continue;
            }
            if self.terminated.contains(&ev.pid) && !matches!(ev.detail, EventDetail::Exit { .. }) {
                self.pending.remove(i);
                continue;
            }
            let ev = self.pending.remove(i).expect("index in range");
            self.last_timestamp = self.last_timestamp.max(ev.timestamp);
            return Some(ev);
        }
        None
    }

    fn suspend(&mut self, pid: u32) -> io::Result<()> {
        self.suspended.insert(pid);
        Ok(())
    }

    fn resume(&mut self, pid: u32) -> io::Result<()> {
        self.suspended.remove(&pid);
        Ok(())
    }

    fn terminate(&mut self, pid: u32) -> io::Result<()> {
        self.suspended.remove(&pid);
        self.terminated.insert(pid);
        self.pending
            .retain(|e| e.pid != pid || matches!(e.detail, EventDetail::Exit { .. }));
        if !self.pending.iter().any(|e| e.pid == pid) {
            let exit = RawEvent::new(
                self.last_timestamp,
                pid,
                EventDetail::Exit {
                    status: KILLED_EXIT_STATUS,
                },
            );
            self.synthesized.push(exit.clone());
            self.pending.push_front(exit);
        }
        Ok(())
    }

    fn is_exhausted(&self) -> bool {
        self.pending.is_empty()
    }

    fn origin(&self) -> Option<u64> {
        self.origin
    }
}

/// Adapter for a live OS probe feed. Events arrive on a channel filled by
/// an external probe loader; enforcement is delivered as SIGSTOP, SIGCONT
/// and SIGKILL.
pub struct OsSignalSource {
    feed: Receiver<RawEvent>,
    disconnected: bool,
    lookahead: Option<RawEvent>,
}

impl OsSignalSource {
    pub fn new(feed: Receiver<RawEvent>) -> Self {
        Self {
            feed,
            disconnected: false,
            lookahead: None,
        }
    }

    fn signal(pid: u32, sig: libc::c_int) -> io::Result<()> {
        let pid = libc::pid_t::try_from(pid)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "pid out of range"))?;
        // SAFETY: kill(2) has no memory-safety preconditions.
        let rc = unsafe { libc::kill(pid, sig) };
        if rc == 0 {
            Ok(())
        } else {
            Err(io::Error::last_os_error())
        }
    }
}

impl TraceSource for OsSignalSource {
    fn next_event(&mut self, until: Option<u64>) -> Option<RawEvent> {
        let ev = match self.lookahead.take() {
            Some(ev) => ev,
            None => match self.feed.try_recv() {
                Ok(ev) => ev,
                Err(TryRecvError::Empty) => return None,
                Err(TryRecvError::Disconnected) => {
                    self.disconnected = true;
                    return None;
                }
            },
        };
        if until.is_some_and(|u| ev.timestamp > u) {
            self.lookahead = Some(ev);
            return None;
        }
        Some(ev)
    }

    fn suspend(&mut self, pid: u32) -> io::Result<()> {
        Self::signal(pid, libc::SIGSTOP)
    }

    fn resume(&mut self, pid: u32) -> io::Result<()> {
        Self::signal(pid, libc::SIGCONT)
    }

    fn terminate(&mut self, pid: u32) -> io::Result<()> {
        match Self::signal(pid, libc::SIGKILL) {
            Err(e) if e.raw_os_error() == Some(libc::ESRCH) => Ok(()),
            other => other,
        }
    }

    fn is_exhausted(&self) -> bool {
        self.disconnected && self.lookahead.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open(ts: u64, pid: u32, path: &str) -> RawEvent {
        RawEvent::new(
            ts,
            pid,
            EventDetail::FileOpen {
                path: path.into(),
                mode: super::super::event::FileMode::Read,
            },
        )
    }

    #[test]
    fn suspended_pid_is_held_and_released_in_order() {
        let mut src = ReplaySource::new(vec![open(1, 42, "/a"), open(2, 7, "/b"), open(3, 42, "/c")]);
        src.suspend(42).unwrap();
        assert_eq!(src.next_event(None).unwrap().pid, 7);
        assert!(src.next_event(None).is_none());
        assert!(!src.is_exhausted());
        src.resume(42).unwrap();
        let rest: Vec<_> = std::iter::from_fn(|| src.next_event(None)).collect();
        assert_eq!(rest, vec![open(1, 42, "/a"), open(3, 42, "/c")]);
        assert!(src.is_exhausted());
    }

    #[test]
    fn terminate_yields_only_exit() {
        let mut src = ReplaySource::new(vec![open(1, 42, "/a"), open(2, 42, "/b"), open(3, 7, "/c")]);
        assert_eq!(src.next_event(None).unwrap(), open(1, 42, "/a"));
        src.suspend(42).unwrap();
        src.terminate(42).unwrap();
        let first = src.next_event(None).unwrap();
        assert_eq!(first.pid, 42);
        assert_eq!(first.detail, EventDetail::Exit { status: KILLED_EXIT_STATUS });
        assert_eq!(src.next_event(None).unwrap().pid, 7);
        assert!(src.next_event(None).is_none());
        assert_eq!(src.synthesized().len(), 1);
    }

    #[test]
    fn recorded_exit_survives_termination() {
        let exit = RawEvent::new(5, 42, EventDetail::Exit { status: 0 });
        let mut src = ReplaySource::new(vec![open(1, 42, "/a"), exit.clone()]);
        src.terminate(42).unwrap();
        assert_eq!(src.next_event(None).unwrap(), exit);
        assert!(src.synthesized().is_empty());
    }

    #[test]
    fn until_bounds_delivery() {
        let mut src = ReplaySource::new(vec![open(10, 1, "/a"), open(20, 1, "/b")]);
        assert_eq!(src.origin(), Some(10));
        assert_eq!(src.next_event(Some(5)), None);
        assert_eq!(src.next_event(Some(10)).unwrap().timestamp, 10);
        assert_eq!(src.next_event(Some(19)), None);
        assert_eq!(src.next_event(Some(20)).unwrap().timestamp, 20);
    }

    #[test]
    fn os_source_reads_feed_in_order() {
        let (tx, rx) = std::sync::mpsc::channel();
        let mut src = OsSignalSource::new(rx);
        tx.send(open(5, 1, "/a")).unwrap();
        tx.send(open(9, 1, "/b")).unwrap();
        assert_eq!(src.next_event(Some(4)), None);
        assert_eq!(src.next_event(Some(6)).unwrap().timestamp, 5);
        assert_eq!(src.next_event(Some(6)), None);
        assert_eq!(src.next_event(None).unwrap().timestamp, 9);
        drop(tx);
        assert_eq!(src.next_event(None), None);
        assert!(src.is_exhausted());
    }
}
