use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::event::TraceEvent;

/// Passive log of every observed and enforcement event.
#[derive(Debug, Default)]
pub struct EventCollector {
    events: Vec<TraceEvent>,
    sink: Option<BufWriter<File>>,
}

impl EventCollector {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_file(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            events: Vec::new(),
            sink: Some(BufWriter::new(file)),
        })
    }

    pub fn push(&mut self, event: &TraceEvent) {
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(event).expect("event serializes");
            if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
                tracing::warn!(error = %e, "event log write failed");
            }
        }
        self.events.push(event.clone());
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }
}
