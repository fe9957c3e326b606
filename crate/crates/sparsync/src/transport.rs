//! Data plane over TCP: `S` parallel streams per peer, shaped through a
//! [`Link`], plus the receiving side that feeds a [`StagingArea`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use sparsync_core::hash::Digest;
use sparsync_core::segment::{
    InsertOutcome, Segment, SegmentError, StagingBuffer, SEGMENT_HEADER_LEN, SEGMENT_MAGIC,
};
use sparsync_core::wire::{DataFrame, FrameLen, Hello, StageStatus, HELLO_LEN};

use crate::link::{sleep_until, Link, StreamShaper};

pub type FrameBytes = Arc<Vec<u8>>;

pub fn write_hello(stream: &mut TcpStream, hello: &Hello) -> io::Result<()> {
    stream.write_all(&hello.to_bytes())
}

pub fn read_hello(r: &mut impl Read) -> io::Result<Hello> {
    let mut b = [0u8; HELLO_LEN];
    r.read_exact(&mut b)?;
    Hello::parse(&b).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn invalid(e: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}

/// Reads one data-plane frame; `Ok(None)` on a clean end of stream.
pub fn read_data_frame(r: &mut impl Read) -> io::Result<Option<DataFrame>> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    if magic == SEGMENT_MAGIC {
        let mut h = [0u8; SEGMENT_HEADER_LEN];
        h[..4].copy_from_slice(&magic);
        r.read_exact(&mut h[4..])?;
        let (mut seg, len) = Segment::parse_header(&h).map_err(invalid)?;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        seg.payload = payload;
        return Ok(Some(DataFrame::Segment(seg)));
    }
    let mut buf = magic.to_vec();
    loop {
        match DataFrame::frame_len(&buf).map_err(invalid)? {
            FrameLen::AtLeast(n) | FrameLen::Exactly(n) if buf.len() < n => {
                let at = buf.len();
                buf.resize(n, 0);
                r.read_exact(&mut buf[at..])?;
            }
            _ => break,
        }
    }
    DataFrame::decode(&buf).map(Some).map_err(invalid)
}

pub type ReplyFn = Arc<dyn Fn(u64, DataFrame) + Send + Sync>;

#[derive(Clone)]
pub struct OutboundConfig {
    pub streams: usize,
    pub link: Option<Arc<Link>>,
    pub seed: u64,
    pub hello: Hello,
    pub connect_timeout: Duration,
}

struct OutItem {
    frame: FrameBytes,
    version: Option<u64>,
    queued_at: Instant,
}

#[derive(Default)]
struct OutShared {
    closed: AtomicBool,
    failed: AtomicBool,
    pending: Mutex<u64>,
    drained: Condvar,
    retransmits: AtomicU64,
    bytes_written: AtomicU64,
    sockets: Mutex<Vec<TcpStream>>,
}

impl OutShared {
    fn done_one(&self) {
        let mut p = self.pending.lock().unwrap();
        *p = p.saturating_sub(1);
        if *p == 0 {
            self.drained.notify_all();
        }
    }
}

/// `S` outbound streams to one peer.
pub struct Outbound {
    peer: u64,
    addr: SocketAddr,
    txs: Vec<Sender<OutItem>>,
    shared: Arc<OutShared>,
}

impl Outbound {
    pub fn connect(addr: SocketAddr, peer: u64, cfg: &OutboundConfig, on_reply: Option<ReplyFn>) -> io::Result<Self> {
        let shared = Arc::new(OutShared::default());
        let mut txs = Vec::new();
        for s in 0..cfg.streams.max(1) {
            let mut stream = TcpStream::connect_timeout(&addr, cfg.connect_timeout)?;
            stream.set_nodelay(true)?;
            write_hello(&mut stream, &cfg.hello)?;
            shared.sockets.lock().unwrap().push(stream.try_clone()?);
            let (tx, rx) = unbounded::<OutItem>();
            txs.push(tx);

            if let Some(on_reply) = on_reply.clone() {
                let mut reader = BufReader::new(stream.try_clone()?);
                let sh = shared.clone();
                thread::Builder::new()
                    .name(format!("out-reply-{peer}-{s}"))
                    .spawn(move || {
                        while !sh.closed.load(Ordering::Relaxed) {
                            match read_data_frame(&mut reader) {
                                Ok(Some(f)) => on_reply(peer, f),
                                _ => break,
                            }
                        }
                    })?;
            }

            let writer_rx = match &cfg.link {
                Some(link) => {
                    let (dtx, drx) = unbounded::<(Instant, OutItem)>();
                    let mut shaper = StreamShaper::new(link.clone(), cfg.seed ^ peer.rotate_left(17), s as u64);
                    let sh = shared.clone();
                    thread::Builder::new()
                        .name(format!("out-shape-{peer}-{s}"))
                        .spawn(move || {
                            for item in rx.iter() {
                                let cancelled = || sh.closed.load(Ordering::Relaxed);
                                if cancelled() {
                                    sh.done_one();
                                    continue;
                                }
                                let r = shaper.transmit(item.frame.len() as u64, item.version, &cancelled);
                                sh.retransmits.fetch_add(r.retransmits as u64, Ordering::Relaxed);
                                if dtx.send((r.deliver_at, item)).is_err() {
                                    sh.done_one();
                                }
                            }
                        })?;
                    drx
                }
                None => {
                    let (dtx, drx) = unbounded::<(Instant, OutItem)>();
                    thread::Builder::new().name(format!("out-pass-{peer}-{s}")).spawn(move || {
                        for item in rx.iter() {
                            if dtx.send((item.queued_at, item)).is_err() {
                                break;
                            }
                        }
                    })?;
                    drx
                }
            };

            let sh = shared.clone();
            let mut w = stream;
            thread::Builder::new()
                .name(format!("out-write-{peer}-{s}"))
                .spawn(move || {
                    for (at, item) in writer_rx.iter() {
                        if !sh.closed.load(Ordering::Relaxed) && !sh.failed.load(Ordering::Relaxed) {
                            sleep_until(at);
                            if w.write_all(&item.frame).is_err() {
                                sh.failed.store(true, Ordering::Relaxed);
                            } else {
                                sh.bytes_written.fetch_add(item.frame.len() as u64, Ordering::Relaxed);
                            }
                        }
                        sh.done_one();
                    }
                })?;
        }
        Ok(Self {
            peer,
            addr,
            txs,
            shared,
        })
    }

    pub fn peer(&self) -> u64 {
        self.peer
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn streams(&self) -> usize {
        self.txs.len()
    }

    pub fn is_alive(&self) -> bool {
        !self.shared.closed.load(Ordering::Relaxed) && !self.shared.failed.load(Ordering::Relaxed)
    }

    pub fn send_frame(&self, stream: usize, frame: FrameBytes, version: Option<u64>) -> bool {
        if !self.is_alive() {
            return false;
        }
        *self.shared.pending.lock().unwrap() += 1;
        let item = OutItem {
            frame,
            version,
            queued_at: Instant::now(),
        };
        if self.txs[stream % self.txs.len()].send(item).is_err() {
            self.shared.done_one();
            return false;
        }
        true
    }

    /// Stripes by segment id.
    pub fn send_segment(&self, segment_id: u32, frame: FrameBytes, version: u64) -> bool {
        let s = sparsync_core::segment::stream_for(segment_id, self.txs.len());
        self.send_frame(s, frame, Some(version))
    }

    pub fn send_data_frame(&self, f: &DataFrame) -> bool {
        self.send_frame(0, Arc::new(f.to_bytes()), None)
    }

    pub fn pending(&self) -> u64 {
        *self.shared.pending.lock().unwrap()
    }

    pub fn wait_drained(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut p = self.shared.pending.lock().unwrap();
        while *p > 0 {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            p = self.shared.drained.wait_timeout(p, deadline - now).unwrap().0;
        }
        true
    }

    pub fn retransmits(&self) -> u64 {
        self.shared.retransmits.load(Ordering::Relaxed)
    }

    pub fn bytes_written(&self) -> u64 {
        self.shared.bytes_written.load(Ordering::Relaxed)
    }

    pub fn close(&self) {
        self.shared.closed.store(true, Ordering::Relaxed);
        for s in self.shared.sockets.lock().unwrap().iter() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Outbound {
    fn drop(&mut self) {
        self.close();
    }
}

/// Write half of an inbound connection, for status replies.
#[derive(Clone)]
pub struct ReplyHandle(Arc<Mutex<TcpStream>>);

impl ReplyHandle {
    pub fn send(&self, f: &DataFrame) -> io::Result<()> {
        self.0.lock().unwrap().write_all(&f.to_bytes())
    }
}

pub trait FrameHandler: Send + Sync {
    fn on_frame(&self, from: &Hello, frame: DataFrame, reply: &ReplyHandle);
}

struct ListenerShared {
    closed: AtomicBool,
    conns: Mutex<Vec<TcpStream>>,
}

/// Accepts data connections and dispatches frames to a handler.
pub struct DataListener {
    addr: SocketAddr,
    shared: Arc<ListenerShared>,
}

impl DataListener {
    pub fn bind(addr: &str, handler: Arc<dyn FrameHandler>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let shared = Arc::new(ListenerShared {
            closed: AtomicBool::new(false),
            conns: Mutex::new(Vec::new()),
        });
        let sh = shared.clone();
        thread::Builder::new().name(format!("data-accept-{}", local.port())).spawn(move || {
            while !sh.closed.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let _ = stream.set_nodelay(true);
                        let Ok(clone) = stream.try_clone() else { continue };
                        sh.conns.lock().unwrap().push(clone);
                        let handler = handler.clone();
                        let sh2 = sh.clone();
                        let _ = thread::Builder::new().name("data-conn".into()).spawn(move || {
                            serve_connection(stream, handler, sh2);
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                    Err(_) => thread::sleep(Duration::from_millis(5)),
                }
            }
        })?;
        Ok(Self { addr: local, shared })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn close(&self) {
        self.shared.closed.store(true, Ordering::Relaxed);
        for c in self.shared.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for DataListener {
    fn drop(&mut self) {
        self.close();
    }
}

fn serve_connection(stream: TcpStream, handler: Arc<dyn FrameHandler>, sh: Arc<ListenerShared>) {
    let Ok(w) = stream.try_clone() else { return };
    let reply = ReplyHandle(Arc::new(Mutex::new(w)));
    let mut r = BufReader::with_capacity(256 << 10, stream);
    let Ok(hello) = read_hello(&mut r) else { return };
    while !sh.closed.load(Ordering::Relaxed) {
        match read_data_frame(&mut r) {
            Ok(Some(f)) => handler.on_frame(&hello, f, &reply),
            Ok(None) | Err(_) => break,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Verified {
    pub version: u64,
    pub hash: Digest,
    pub bytes: Arc<Vec<u8>>,
    pub first_segment_at: Instant,
    pub complete_at: Instant,
    pub verified_at: Instant,
}

/// What one segment insertion did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageEvent {
    /// First segment of a version arrived.
    Started,
    Stored,
    Duplicate,
    /// The version is not `active + 1`; reported once per version.
    Refused { first: bool },
    Corrupt,
    /// The version completed and verified; `started` when this was also
    /// its first segment.
    Verified { hash: Digest, started: bool },
    HashMismatch { started: bool },
}

#[derive(Default)]
struct StagingInner {
    accept: Option<u64>,
    buffers: BTreeMap<u64, StagingBuffer>,
    first_seen: BTreeMap<u64, Instant>,
    verifying: BTreeSet<u64>,
    verified: BTreeMap<u64, Verified>,
    refused: BTreeSet<u64>,
    failed: BTreeSet<u64>,
    corrupt_segments: u64,
}

/// Concurrent reassembly for versions arriving over several streams. Only
/// the version set by [`StagingArea::accept_only`] is buffered.
#[derive(Default)]
pub struct StagingArea {
    inner: Mutex<StagingInner>,
    cv: Condvar,
}

impl StagingArea {
    pub fn new(accept: Option<u64>) -> Self {
        let s = Self::default();
        s.inner.lock().unwrap().accept = accept;
        s
    }

    /// Sets the single version segments are accepted for; drops buffers
    /// and verified artifacts of older versions.
    pub fn accept_only(&self, version: u64) {
        let mut g = self.inner.lock().unwrap();
        g.accept = Some(version);
        g.buffers.retain(|&v, _| v >= version);
        g.verified.retain(|&v, _| v >= version);
        g.refused.retain(|&v| v > version);
        g.failed.retain(|&v| v >= version);
    }

    pub fn accepted_version(&self) -> Option<u64> {
        self.inner.lock().unwrap().accept
    }

    pub fn insert(&self, seg: &Segment) -> StageEvent {
        let v = seg.version;
        let complete_bytes;
        let first_seen;
        let first_segment;
        {
            let mut g = self.inner.lock().unwrap();
            if g.verified.contains_key(&v) || g.verifying.contains(&v) {
                return StageEvent::Duplicate;
            }
            if g.accept != Some(v) {
                let first = g.refused.insert(v);
                return StageEvent::Refused { first };
            }
            let started = !g.first_seen.contains_key(&v);
            if started {
                g.first_seen.insert(v, Instant::now());
                g.failed.remove(&v);
            }
            let buf = g.buffers.entry(v).or_insert_with(|| StagingBuffer::new(v));
            match buf.insert(seg) {
                Ok(InsertOutcome::Duplicate) => return StageEvent::Duplicate,
                Ok(InsertOutcome::Stored) => {}
                Err(SegmentError::CrcMismatch(_)) => {
                    g.corrupt_segments += 1;
                    return StageEvent::Corrupt;
                }
                Err(_) => {
                    g.corrupt_segments += 1;
                    return StageEvent::Corrupt;
                }
            }
            if !buf.is_complete() {
                return if started { StageEvent::Started } else { StageEvent::Stored };
            }
            first_segment = started;
            complete_bytes = g.buffers.remove(&v).unwrap();
            first_seen = g.first_seen[&v];
            g.verifying.insert(v);
        }
        let complete_at = Instant::now();
        let mut buf = complete_bytes;
        let result = buf.verify();
        let mut g = self.inner.lock().unwrap();
        g.verifying.remove(&v);
        g.first_seen.remove(&v);
        let ev = match result {
            Ok(hash) => {
                g.verified.insert(
                    v,
                    Verified {
                        version: v,
                        hash,
                        bytes: Arc::new(buf.into_bytes()),
                        first_segment_at: first_seen,
                        complete_at,
                        verified_at: Instant::now(),
                    },
                );
                StageEvent::Verified {
                    hash,
                    started: first_segment,
                }
            }
            Err(_) => {
                g.failed.insert(v);
                StageEvent::HashMismatch { started: first_segment }
            }
        };
        self.cv.notify_all();
        ev
    }

    pub fn verified(&self, version: u64) -> Option<Verified> {
        self.inner.lock().unwrap().verified.get(&version).cloned()
    }

    pub fn take_verified(&self, version: u64) -> Option<Verified> {
        self.inner.lock().unwrap().verified.remove(&version)
    }

    pub fn verified_versions(&self) -> Vec<u64> {
        self.inner.lock().unwrap().verified.keys().copied().collect()
    }

    pub fn wait_verified(&self, version: u64, timeout: Duration) -> Option<Verified> {
        let deadline = Instant::now() + timeout;
        let mut g = self.inner.lock().unwrap();
        loop {
            if let Some(v) = g.verified.get(&version) {
                return Some(v.clone());
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            g = self.cv.wait_timeout(g, deadline - now).unwrap().0;
        }
    }

    pub fn corrupt_segments(&self) -> u64 {
        self.inner.lock().unwrap().corrupt_segments
    }

    pub fn status(&self, version: u64) -> (StageStatus, Vec<u32>) {
        let g = self.inner.lock().unwrap();
        if g.verified.contains_key(&version) {
            return (StageStatus::Complete, Vec::new());
        }
        if g.failed.contains(&version) {
            return (StageStatus::HashMismatch, Vec::new());
        }
        if g.accept != Some(version) {
            return (StageStatus::Refused, Vec::new());
        }
        let missing = g.buffers.get(&version).map(|b| b.missing_ids()).unwrap_or_else(|| vec![0]);
        (StageStatus::Missing, missing)
    }

    /// Discards a failed or partial version so it can be sent again.
    pub fn reset(&self, version: u64) {
        let mut g = self.inner.lock().unwrap();
        g.buffers.remove(&version);
        g.first_seen.remove(&version);
        g.failed.remove(&version);
    }
}

/// Frame handler that only stages segments and answers status queries.
pub struct StagingSink(pub Arc<StagingArea>);

impl FrameHandler for StagingSink {
    fn on_frame(&self, _from: &Hello, frame: DataFrame, reply: &ReplyHandle) {
        match frame {
            DataFrame::Segment(seg) => {
                self.0.insert(&seg);
            }
            DataFrame::StatusQuery { version } => {
                let (status, missing) = self.0.status(version);
                let _ = reply.send(&DataFrame::StatusReply {
                    version,
                    status,
                    missing,
                });
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub bytes: u64,
    pub segments: u32,
    pub streams: usize,
    /// Send start to the last byte reassembled.
    pub transfer: Duration,
    /// Send start to hash verification.
    pub verified: Duration,
    pub retransmits: u64,
    pub wire_bytes: u64,
}

/// Sends one serialized checkpoint over `streams` shaped TCP streams to a
/// local staging receiver and waits until it is verified.
pub fn loopback_transfer(
    bytes: &[u8],
    version: u64,
    segment_size: usize,
    streams: usize,
    link: Arc<Link>,
    seed: u64,
) -> io::Result<TransferReport> {
    let staging = Arc::new(StagingArea::new(Some(version)));
    let listener = DataListener::bind("127.0.0.1:0", Arc::new(StagingSink(staging.clone())))?;
    let cfg = OutboundConfig {
        streams,
        link: Some(link.clone()),
        seed,
        hello: Hello::new(sparsync_core::wire::Role::Hub, 0),
        connect_timeout: Duration::from_secs(5),
    };
    let out = Outbound::connect(listener.local_addr(), 1, &cfg, None)?;
    let wire_before = link.wire_bytes();
    let total = bytes.len().div_ceil(segment_size).max(1) as u32;
    let frames: Vec<(u32, FrameBytes)> = sparsync_core::segment::segmentize(bytes, version, segment_size)
        .map_err(invalid)?
        .into_iter()
        .map(|s| (s.segment_id, Arc::new(s.to_frame())))
        .collect();
    let start = Instant::now();
    for (id, frame) in frames {
        out.send_segment(id, frame, version);
    }
    let timeout = Duration::from_secs(600);
    let v = staging
        .wait_verified(version, timeout)
        .ok_or_else(|| io::Error::new(io::ErrorKind::TimedOut, "transfer did not complete"))?;
    let report = TransferReport {
        bytes: bytes.len() as u64,
        segments: total,
        streams,
        transfer: v.complete_at.saturating_duration_since(start),
        verified: v.verified_at.saturating_duration_since(start),
        retransmits: out.retransmits(),
        wire_bytes: link.wire_bytes() - wire_before,
    };
    out.close();
    listener.close();
    Ok(report)
}

/// Channel pair used by roles to hand frames to a worker.
pub fn channel<T>() -> (Sender<T>, Receiver<T>) {
    unbounded()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::LinkShape;
    use sparsync_core::{DeltaCheckpoint, ElementType, TensorDelta};

    fn artifact(n: usize) -> Vec<u8> {
        let values: Vec<u8> = (0..n).map(|i| (i * 7 % 253) as u8).collect();
        DeltaCheckpoint::new(1, 0, ElementType::Bf16, vec![TensorDelta::dense("w", values, 2)])
            .unwrap()
            .to_bytes()
    }

    #[test]
    fn loopback_unshaped_is_exact() {
        let bytes = artifact(3 << 20);
        let staging = Arc::new(StagingArea::new(Some(1)));
        let listener = DataListener::bind("127.0.0.1:0", Arc::new(StagingSink(staging.clone()))).unwrap();
        let cfg = OutboundConfig {
            streams: 3,
            link: None,
            seed: 0,
            hello: Hello::new(sparsync_core::wire::Role::Hub, 0),
            connect_timeout: Duration::from_secs(5),
        };
        let out = Outbound::connect(listener.local_addr(), 1, &cfg, None).unwrap();
        for seg in sparsync_core::segment::segmentize(&bytes, 1, 64 << 10).unwrap() {
            out.send_segment(seg.segment_id, Arc::new(seg.to_frame()), 1);
        }
        let v = staging.wait_verified(1, Duration::from_secs(20)).unwrap();
        assert_eq!(&v.bytes[..], &bytes[..]);
    }

    #[test]
    fn lossy_transfer_completes_with_retransmits() {
        let bytes = artifact(2 << 20);
        let shape = LinkShape {
            rate_bps: 2e9,
            latency_ms: 1.0,
            loss: 0.05,
            jitter_ms: 0.5,
        };
        let r = loopback_transfer(&bytes, 1, 16 << 10, 4, Link::new("l", shape), 9).unwrap();
        assert!(r.retransmits > 0);
        assert!(r.wire_bytes > r.bytes);
    }

    #[test]
    fn refuses_other_versions_and_reports_status() {
        let staging = StagingArea::new(Some(2));
        let seg = Segment::new(3, 0, 1, 0, vec![1, 2, 3]);
        assert_eq!(staging.insert(&seg), StageEvent::Refused { first: true });
        assert_eq!(staging.insert(&seg), StageEvent::Refused { first: false });
        assert_eq!(staging.status(3).0, StageStatus::Refused);
        assert_eq!(staging.status(2), (StageStatus::Missing, vec![0]));
    }

    #[test]
    fn corrupted_artifact_never_verifies() {
        let bytes = artifact(4096);
        let staging = StagingArea::new(Some(1));
        let mut segs = sparsync_core::segment::segmentize(&bytes, 1, 1024).unwrap();
        let last = segs.len() - 1;
        let mut p = segs[last].payload.clone();
        p[3] ^= 0x10;
        segs[last] = Segment::new(1, last as u32, segs[last].total_segments, segs[last].byte_offset, p);
        let events: Vec<StageEvent> = segs.iter().map(|s| staging.insert(s)).collect();
        assert_eq!(events.last(), Some(&StageEvent::HashMismatch { started: false }));
        assert!(staging.verified(1).is_none());
        assert_eq!(staging.status(1).0, StageStatus::HashMismatch);
    }
}
