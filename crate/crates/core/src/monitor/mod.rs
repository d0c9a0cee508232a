//! Composition root: binds protocol sessions to a tracer and an auditor.

pub mod config;
pub mod loopback;
pub mod pipeline;
pub mod server;
pub mod session;

pub use config::{AuditorConfig, ConfigError, LoadedConfig, MonitorConfig, TraceSourceConfig};
pub use loopback::LoopbackTransport;
pub use pipeline::{BackendSpec, Pipeline, SessionEnv, SessionSlot};
pub use server::{PumpMode, RunningServer, Server, ServerError, SessionHandle};
pub use session::{lock, Reply, ServerSession, SessionHost, SessionState, SharedState};
