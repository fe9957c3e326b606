//! Append-only timeline shared by every node of one run.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Hub started sending a version to a node.
    SendStart,
    /// First segment of a version reached a node.
    StageStart,
    /// A version was reassembled and its hash verified.
    Staged,
    StageHashMismatch,
    Activated,
    GenerationStart,
    GenerationEnd,
    /// A relay forwarded its first segment of a version.
    RelayForwardFirst,
    /// A relay received the last segment of a version.
    RelayReceiveLast,
    CommitSent,
    CollectionStart,
    CollectionEnd,
    TrainStart,
    TrainEnd,
    Excluded,
    ActorDead,
    ActorRegistered,
    LeaseExpired,
    Fault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t_us: u64,
    pub node: u64,
    pub kind: EventKind,
    pub version: u64,
    #[serde(default)]
    pub value: f64,
}

struct Inner {
    events: Vec<Event>,
    sink: Option<BufWriter<File>>,
}

/// Cheap to clone; all clones share one clock and one buffer.
#[derive(Clone)]
pub struct EventLog {
    start: Instant,
    inner: Arc<Mutex<Inner>>,
}

/// Node id the hub logs under.
pub const HUB_NODE: u64 = 0;

impl EventLog {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
            inner: Arc::new(Mutex::new(Inner {
                events: Vec::new(),
                sink: None,
            })),
        }
    }

    /// Also streams every event to `path` as JSON lines.
    pub fn with_file(path: &Path) -> std::io::Result<Self> {
        let log = Self::new();
        log.inner.lock().unwrap().sink = Some(BufWriter::new(File::create(path)?));
        Ok(log)
    }

    pub fn start(&self) -> Instant {
        self.start
    }

    pub fn micros(&self, at: Instant) -> u64 {
        at.saturating_duration_since(self.start).as_micros() as u64
    }

    pub fn now_us(&self) -> u64 {
        self.micros(Instant::now())
    }

    pub fn record(&self, node: u64, kind: EventKind, version: u64, value: f64) -> u64 {
        self.record_at(Instant::now(), node, kind, version, value)
    }

    pub fn record_at(&self, at: Instant, node: u64, kind: EventKind, version: u64, value: f64) -> u64 {
        let e = Event {
            t_us: self.micros(at),
            node,
            kind,
            version,
            value,
        };
        let t = e.t_us;
        let mut g = self.inner.lock().unwrap();
        if let Some(w) = g.sink.as_mut() {
            if serde_json::to_writer(&mut *w, &e).is_ok() {
                let _ = w.write_all(b"\n");
            }
        }
        g.events.push(e);
        t
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.inner.lock().unwrap().events.clone()
    }

    pub fn first(&self, node: u64, kind: EventKind, version: u64) -> Option<u64> {
        self.inner
            .lock()
            .unwrap()
            .events
            .iter()
            .find(|e| e.node == node && e.kind == kind && e.version == version)
            .map(|e| e.t_us)
    }

    pub fn flush(&self) {
        if let Some(w) = self.inner.lock().unwrap().sink.as_mut() {
            let _ = w.flush();
        }
    }
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new()
    }
}

pub fn read_events(path: &Path) -> std::io::Result<Vec<Event>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}
