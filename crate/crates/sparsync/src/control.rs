//! Length-prefixed control channel between the hub and one actor.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Sender};
use sparsync_core::wire::{ControlMessage, MAX_CONTROL_FRAME};

use crate::link::{sleep_until, Link};

pub fn read_control(r: &mut impl Read) -> io::Result<ControlMessage> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len == 0 || len > MAX_CONTROL_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("control frame of {len} bytes")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    ControlMessage::decode(&buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub fn write_control(w: &mut impl Write, msg: &ControlMessage) -> io::Result<()> {
    w.write_all(&msg.encode())
}

/// Asynchronous sender. With a link, each message is held for the one-way
/// latency and while the link is partitioned; order is preserved.
#[derive(Clone)]
pub struct ControlSender {
    tx: Sender<(Instant, Vec<u8>)>,
    alive: Arc<AtomicBool>,
    stream: Arc<TcpStream>,
}

impl ControlSender {
    pub fn spawn(stream: TcpStream, link: Option<Arc<Link>>) -> io::Result<Self> {
        let (tx, rx) = unbounded::<(Instant, Vec<u8>)>();
        let alive = Arc::new(AtomicBool::new(true));
        let shared = Arc::new(stream.try_clone()?);
        let a = alive.clone();
        let mut w = stream;
        thread::Builder::new().name("control-send".into()).spawn(move || {
            let cancelled = || !a.load(Ordering::Relaxed);
            for (queued, frame) in rx.iter() {
                if let Some(link) = &link {
                    link.wait_open(&cancelled);
                    let latency = Duration::from_secs_f64(link.shape().latency_ms / 1e3);
                    sleep_until(queued + latency);
                }
                if cancelled() || w.write_all(&frame).is_err() {
                    a.store(false, Ordering::Relaxed);
                    break;
                }
            }
        })?;
        Ok(Self {
            tx,
            alive,
            stream: shared,
        })
    }

    pub fn send(&self, msg: &ControlMessage) -> bool {
        self.is_alive() && self.tx.send((Instant::now(), msg.encode())).is_ok()
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::Relaxed)
    }

    pub fn close(&self) {
        self.alive.store(false, Ordering::Relaxed);
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}
