//! In-process WAN emulation: a shared token bucket on a virtual clock,
//! per-stream seeded segment drops, latency with jitter, and partitions.
//!
//! All streams crossing one [`Link`] share its rate. The bucket starts
//! empty, so `n` bytes never complete sooner than `8 n / rate` seconds after
//! the first reservation. A dropped segment still consumes its bytes, then
//! stalls its stream for one retransmission timeout before being resent.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkShape {
    /// Bits per second; `0` means unshaped.
    #[serde(default)]
    pub rate_bps: f64,
    /// One-way delay.
    #[serde(default)]
    pub latency_ms: f64,
    /// Per-segment drop probability.
    #[serde(default)]
    pub loss: f64,
    /// Uniform extra delay in `[-jitter, +jitter]`, never below zero.
    #[serde(default)]
    pub jitter_ms: f64,
}

impl Default for LinkShape {
    fn default() -> Self {
        Self::unshaped()
    }
}

impl LinkShape {
    pub const fn unshaped() -> Self {
        Self {
            rate_bps: 0.0,
            latency_ms: 0.0,
            loss: 0.0,
            jitter_ms: 0.0,
        }
    }

    pub fn gbps(g: f64) -> Self {
        Self {
            rate_bps: g * 1e9,
            ..Self::unshaped()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.rate_bps < 0.0 || !self.rate_bps.is_finite() {
            return Err("rate must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.loss) {
            return Err("loss must be in [0, 1)".into());
        }
        if self.latency_ms < 0.0 || self.jitter_ms < 0.0 {
            return Err("latency and jitter must be non-negative".into());
        }
        Ok(())
    }

    /// Round-trip estimate, never below 1 ms.
    pub fn rtt(&self) -> Duration {
        Duration::from_secs_f64((2.0 * self.latency_ms).max(1.0) / 1e3)
    }

    /// Retransmission timeout: two round trips.
    pub fn rto(&self) -> Duration {
        self.rtt() * 2
    }

    /// Serialization time of `bytes` at the shaped rate.
    pub fn serialization(&self, bytes: u64) -> Duration {
        if self.rate_bps <= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(bytes as f64 * 8.0 / self.rate_bps)
        }
    }
}

/// One shaped path (e.g. trainer to a region), shared by every stream and
/// peer that crosses it.
#[derive(Debug)]
pub struct Link {
    name: String,
    shape: LinkShape,
    next_free: Mutex<Option<Instant>>,
    partitioned: AtomicBool,
    bytes: AtomicU64,
    wire_bytes: AtomicU64,
    drops: AtomicU64,
    by_version: Mutex<BTreeMap<u64, u64>>,
}

impl Link {
    pub fn new(name: impl Into<String>, shape: LinkShape) -> Arc<Self> {
        Arc::new(Self {
            name: name.into(),
            shape,
            next_free: Mutex::new(None),
            partitioned: AtomicBool::new(false),
            bytes: AtomicU64::new(0),
            wire_bytes: AtomicU64::new(0),
            drops: AtomicU64::new(0),
            by_version: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &LinkShape {
        &self.shape
    }

    /// Reserves `bytes` of link time; returns when their last bit leaves.
    pub fn reserve(&self, bytes: u64) -> Instant {
        let now = Instant::now();
        self.wire_bytes.fetch_add(bytes, Ordering::Relaxed);
        if self.shape.rate_bps <= 0.0 {
            return now;
        }
        let mut next = self.next_free.lock().unwrap();
        let start = match *next {
            Some(t) if t > now => t,
            _ => now,
        };
        let done = start + self.shape.serialization(bytes);
        *next = Some(done);
        done
    }

    pub fn set_partitioned(&self, on: bool) {
        self.partitioned.store(on, Ordering::SeqCst);
    }

    pub fn is_partitioned(&self) -> bool {
        self.partitioned.load(Ordering::SeqCst)
    }

    /// Blocks while the link is partitioned, polling once per RTO.
    pub fn wait_open(&self, cancelled: &dyn Fn() -> bool) {
        while self.is_partitioned() && !cancelled() {
            std::thread::sleep(self.shape.rto().min(Duration::from_millis(20)));
        }
    }

    fn account(&self, version: Option<u64>, bytes: u64) {
        self.bytes.fetch_add(bytes, Ordering::Relaxed);
        if let Some(v) = version {
            *self.by_version.lock().unwrap().entry(v).or_default() += bytes;
        }
    }

    /// Delivered bytes (each frame counted once).
    pub fn bytes_sent(&self) -> u64 {
        self.bytes.load(Ordering::Relaxed)
    }

    /// Bytes put on the wire, retransmissions included.
    pub fn wire_bytes(&self) -> u64 {
        self.wire_bytes.load(Ordering::Relaxed)
    }

    pub fn drops(&self) -> u64 {
        self.drops.load(Ordering::Relaxed)
    }

    pub fn bytes_for_version(&self, version: u64) -> u64 {
        self.by_version.lock().unwrap().get(&version).copied().unwrap_or(0)
    }

    pub fn bytes_by_version(&self) -> BTreeMap<u64, u64> {
        self.by_version.lock().unwrap().clone()
    }
}

pub fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        std::thread::sleep(t - now);
    }
}

/// Per-stream view of a link: its own drop RNG and order-preserving
/// delivery clock.
pub struct StreamShaper {
    link: Arc<Link>,
    rng: ChaCha8Rng,
    last_delivery: Option<Instant>,
    retransmits: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct Shaped {
    pub deliver_at: Instant,
    pub retransmits: u32,
}

impl StreamShaper {
    pub fn new(link: Arc<Link>, seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&stream.to_le_bytes());
        key[16..24].copy_from_slice(&(link.name.len() as u64).to_le_bytes());
        for (i, b) in link.name.bytes().take(8).enumerate() {
            key[24 + i] = b;
        }
        Self {
            link,
            rng: ChaCha8Rng::from_seed(key),
            last_delivery: None,
            retransmits: 0,
        }
    }

    pub fn link(&self) -> &Arc<Link> {
        &self.link
    }

    pub fn retransmits(&self) -> u64 {
        self.retransmits
    }

    /// Whether the next transmission attempt is dropped. Consumes exactly
    /// one draw, so the pattern depends only on the seed and attempt count.
    pub fn draw_drop(&mut self) -> bool {
        let loss = self.link.shape.loss;
        loss > 0.0 && self.rng.random::<f64>() < loss
    }

    fn jitter(&mut self) -> Duration {
        let s = &self.link.shape;
        let mut ms = s.latency_ms;
        if s.jitter_ms > 0.0 {
            ms += self.rng.random_range(-s.jitter_ms..=s.jitter_ms);
        }
        Duration::from_secs_f64(ms.max(0.0) / 1e3)
    }

    /// Pushes one frame through the link, blocking the calling stream for
    /// serialization, partitions and retransmission stalls. Returns the
    /// instant at which the frame should reach the peer.
    pub fn transmit(&mut self, bytes: u64, version: Option<u64>, cancelled: &dyn Fn() -> bool) -> Shaped {
        let mut retransmits = 0;
        loop {
            self.link.wait_open(cancelled);
            let done = self.link.reserve(bytes);
            if self.draw_drop() {
                self.link.drops.fetch_add(1, Ordering::Relaxed);
                retransmits += 1;
                self.retransmits += 1;
                sleep_until(done + self.link.shape.rto());
                if cancelled() {
                    break;
                }
                continue;
            }
            sleep_until(done);
            self.link.account(version, bytes);
            let mut at = done + self.jitter();
            if let Some(prev) = self.last_delivery {
                at = at.max(prev);
            }
            self.last_delivery = Some(at);
            return Shaped {
                deliver_at: at,
                retransmits,
            };
        }
        Shaped {
            deliver_at: Instant::now(),
            retransmits,
        }
    }
}
