//! Trainer hub: job ledger owner, simulated trainer, checkpoint store and
//! broadcaster.
//!
//! Collections and training overlap with a one-step lag. Collection `k`
//! gathers `B` accepted rollouts on version `max(0, k - 2)`; training step
//! `k` consumes them and produces version `k`, which is streamed to actors
//! while collection `k + 1` runs on version `k - 1`.

use std::collections::{BTreeMap, HashMap};
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};
use sparsync_core::codec::{extract_tensor, CheckpointEncoder};
use sparsync_core::hash::Digest;
use sparsync_core::ledger::{InvariantCounters, JobLedger, JobState, LeaseConfig, Micros, ResultReport, Verdict};
use sparsync_core::scheduler::{ActorId, ScheduleError, SchedulerParams};
use sparsync_core::segment::{segmentize, CutThroughSegmenter};
use sparsync_core::wire::{ControlMessage, DataFrame, Hello, JobSpec, Role, StageStatus};
use sparsync_core::{DeltaCheckpoint, DeltaMode, ElementType, FusionMap, ParameterSet};

use crate::actor::rank;
use crate::control::{read_control, ControlSender};
use crate::events::{EventKind, EventLog, HUB_NODE};
use crate::link::Link;
use crate::store::{CheckpointStore, RolloutBatch};
use crate::synth::{transformer_model, UpdateGenerator};
use crate::transport::{FrameBytes, Outbound, OutboundConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Broadcast {
    /// Sparse deltas.
    Delta,
    /// Dense snapshot of every version.
    Full,
}

#[derive(Clone)]
pub struct HubConfig {
    pub broadcast: Broadcast,
    pub steps: u64,
    pub tokens_per_prompt: u32,
    pub scheduler: SchedulerParams,
    pub lease: LeaseConfig,
    pub initial_tau: f64,
    pub streams: usize,
    pub segment_size: usize,
    pub relay_enabled: bool,
    pub train_time: Duration,
    pub heartbeat_timeout: Duration,
    /// How long a ready collection waits for lagging actors to become
    /// eligible before allocating without them.
    pub allocation_grace: Duration,
    pub transfer_timeout: Duration,
    pub commit_timeout: Duration,
    pub stall_timeout: Duration,
    pub expected_actors: usize,
    pub seed: u64,
    pub model_elements: u64,
    pub element_type: ElementType,
    pub rho: f64,
    pub cluster_fraction: f64,
    pub mean_run: f64,
    pub delta_mode: DeltaMode,
    pub store_dir: PathBuf,
    pub links: BTreeMap<String, Arc<Link>>,
    pub verify_params: bool,
}

/// Observable run progress, for fault injection.
#[derive(Default)]
pub struct Progress {
    pub collection_started: AtomicU64,
    pub steps_done: AtomicU64,
    pub abort: AtomicBool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub version: u64,
    pub collection_version: u64,
    pub wall_s: f64,
    pub collection_s: f64,
    pub train_s: f64,
    pub payload_bytes: u64,
    pub nnz: u64,
    pub rho: f64,
    pub index_bytes: u64,
    pub tokens: u64,
    pub accepted: u32,
    pub rejected: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocationRow {
    pub step: u64,
    pub version: u64,
    pub topup: bool,
    pub actor: u64,
    pub tau: f64,
    pub share: u32,
    pub eligible: bool,
    pub excluded: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HubReport {
    pub steps: Vec<StepMetrics>,
    pub allocations: Vec<AllocationRow>,
    pub invariants: Invariants,
    pub rejected: BTreeMap<String, u64>,
    pub accepted_total: u64,
    pub expired_prompts: u64,
    pub tokens_total: u64,
    /// Fused-layout parameter digest of every version the hub produced.
    #[serde(skip)]
    pub digests: BTreeMap<u64, Digest>,
    #[serde(skip)]
    pub hashes: BTreeMap<u64, Digest>,
    pub artifact_bytes: BTreeMap<u64, u64>,
    pub total_wall_s: f64,
    pub run_start_us: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invariants {
    pub stale_work_issued: u64,
    pub duplicate_prompt_settlements: u64,
    pub wrong_version_accepted: u64,
    /// Accepted rollout whose behavior version is not its collection's.
    pub off_collection_accepted: u64,
    /// Accepted rollout whose actor-side parameter digest is not the hub's.
    pub param_digest_mismatches: u64,
}

impl Invariants {
    fn from_ledger(c: InvariantCounters) -> Self {
        Self {
            stale_work_issued: c.stale_work_issued,
            duplicate_prompt_settlements: c.duplicate_prompt_settlements,
            wrong_version_accepted: c.wrong_version_accepted,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> u64 {
        self.stale_work_issued
            + self.duplicate_prompt_settlements
            + self.wrong_version_accepted
            + self.off_collection_accepted
            + self.param_digest_mismatches
    }
}

struct Artifact {
    frames: Arc<Vec<(u32, FrameBytes)>>,
}

struct TrainOutput {
    step: u64,
    hash: Digest,
    len: u64,
    nnz: u64,
    rho: f64,
    index_bytes: u64,
    digest: Option<Digest>,
    frames: Arc<Vec<(u32, FrameBytes)>>,
    started: Instant,
    ended: Instant,
}

enum Inbound {
    Connected {
        actor_id: ActorId,
        conn: u64,
        is_relay: bool,
        region: String,
        data_addr: String,
        control: ControlSender,
    },
    Message {
        actor_id: ActorId,
        conn: u64,
        msg: ControlMessage,
        at: Instant,
    },
    Disconnected {
        actor_id: ActorId,
        conn: u64,
    },
    Status {
        actor_id: ActorId,
        version: u64,
        status: StageStatus,
        missing: Vec<u32>,
    },
    Segment {
        version: u64,
        id: u32,
        frame: FrameBytes,
    },
    Trained(Box<TrainOutput>),
    TrainFailed(String),
}

struct Transfer {
    started: Instant,
    via: Option<ActorId>,
}

struct Peer {
    conn: u64,
    control: ControlSender,
    data: Option<Arc<Outbound>>,
    region: String,
    is_relay: bool,
    transfers: BTreeMap<u64, Transfer>,
    commit_sent: BTreeMap<u64, Instant>,
    dead_logged: bool,
}

impl Peer {
    fn close(&self) {
        self.control.close();
        if let Some(d) = &self.data {
            d.close();
        }
    }
}

struct Collection {
    version: u64,
    started: Instant,
    ended: Option<Instant>,
    accepted: u32,
    rejected: u32,
    tokens: u64,
}

struct CastState {
    version: u64,
    targets: Vec<Arc<Outbound>>,
}

pub struct Hub {
    cfg: HubConfig,
    listener: TcpListener,
    events: EventLog,
    progress: Arc<Progress>,
}

impl Hub {
    pub fn bind(cfg: HubConfig, addr: &str, events: EventLog) -> anyhow::Result<Self> {
        cfg.scheduler.validate().map_err(|e| anyhow!("{e}"))?;
        let listener = TcpListener::bind(addr)?;
        Ok(Self {
            cfg,
            listener,
            events,
            progress: Arc::new(Progress::default()),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound")
    }

    pub fn progress(&self) -> Arc<Progress> {
        self.progress.clone()
    }

    pub fn run(self) -> anyhow::Result<HubReport> {
        let (tx, rx) = unbounded();
        spawn_acceptor(self.listener.try_clone()?, tx.clone(), self.cfg.links.clone())?;
        let mut state = HubState::new(self.cfg, self.events, self.progress, tx)?;
        let result = state.run(&rx);
        state.shutdown();
        result.map(|_| state.report())
    }
}

fn spawn_acceptor(listener: TcpListener, tx: Sender<Inbound>, links: BTreeMap<String, Arc<Link>>) -> anyhow::Result<()> {
    let next_conn = Arc::new(AtomicU64::new(1));
    thread::Builder::new().name("hub-accept".into()).spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let tx = tx.clone();
            let links = links.clone();
            let conn = next_conn.fetch_add(1, Ordering::Relaxed);
            let _ = thread::Builder::new()
                .name("hub-control".into())
                .spawn(move || serve_control(stream, conn, tx, links));
        }
    })?;
    Ok(())
}

fn serve_control(stream: TcpStream, conn: u64, tx: Sender<Inbound>, links: BTreeMap<String, Arc<Link>>) {
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else { return };
    let mut r = BufReader::new(read_half);
    let Ok(ControlMessage::Register {
        actor_id,
        is_relay,
        region,
        data_addr,
    }) = read_control(&mut r)
    else {
        return;
    };
    let Ok(control) = ControlSender::spawn(stream, links.get(&region).cloned()) else { return };
    if tx
        .send(Inbound::Connected {
            actor_id,
            conn,
            is_relay,
            region,
            data_addr,
            control,
        })
        .is_err()
    {
        return;
    }
    loop {
        match read_control(&mut r) {
            Ok(msg) => {
                let at = Instant::now();
                if tx
                    .send(Inbound::Message {
                        actor_id,
                        conn,
                        msg,
                        at,
                    })
                    .is_err()
                {
                    return;
                }
            }
            Err(_) => {
                let _ = tx.send(Inbound::Disconnected { actor_id, conn });
                return;
            }
        }
    }
}

struct Trainer {
    cfg: HubConfig,
    params: ParameterSet,
    fusion: FusionMap,
    gen: UpdateGenerator,
    store: Arc<Mutex<CheckpointStore>>,
}

impl Trainer {
    fn train(&mut self, step: u64, tx: &Sender<Inbound>) -> anyhow::Result<TrainOutput> {
        let started = Instant::now();
        let mut next = self.params.clone();
        let changed = self.gen.step(&mut next);
        let ready = started + self.cfg.train_time;
        crate::link::sleep_until(ready);
        let version = step;
        let base = step - 1;
        let et = next.element_type();
        let mut frames: Vec<(u32, FrameBytes)> = Vec::new();
        let (bytes, nnz, index_bytes) = match self.cfg.broadcast {
            Broadcast::Delta => {
                let mut segments = Vec::new();
                let emit = |seg: sparsync_core::segment::Segment| {
                    let frame = Arc::new(seg.to_frame());
                    let _ = tx.send(Inbound::Segment {
                        version,
                        id: seg.segment_id,
                        frame: frame.clone(),
                    });
                    frames.push((seg.segment_id, frame));
                    segments.push(seg);
                };
                let sink = CutThroughSegmenter::for_checkpoint(version, self.cfg.segment_size, emit)?;
                let mut enc = CheckpointEncoder::new(sink, version, base, et);
                let (mut nnz, mut index_bytes) = (0, 0);
                for fused in self.fusion.entries() {
                    let td = extract_tensor(&self.params, &next, fused, self.cfg.delta_mode)?;
                    nnz += td.nnz;
                    index_bytes += td.index_stream.len() as u64;
                    enc.push(td.as_ref())?;
                }
                let (header, sink) = enc.finish();
                sink.finish(&header.to_bytes());
                segments.sort_by_key(|s| s.segment_id);
                let mut bytes = Vec::with_capacity(header.total_len() as usize);
                for s in segments.iter().filter(|s| !s.is_terminal()) {
                    bytes.extend_from_slice(&s.payload);
                }
                (bytes, nnz, index_bytes)
            }
            Broadcast::Full => {
                let fused = self.fusion.fused_layout(&next)?;
                let snap = DeltaCheckpoint::snapshot(&fused, version)?;
                drop(fused);
                let bytes = snap.to_bytes();
                drop(snap);
                for seg in segmentize(&bytes, version, self.cfg.segment_size)? {
                    let frame = Arc::new(seg.to_frame());
                    let _ = tx.send(Inbound::Segment {
                        version,
                        id: seg.segment_id,
                        frame: frame.clone(),
                    });
                    frames.push((seg.segment_id, frame));
                }
                (bytes, next.total_elements(), 0)
            }
        };
        let digest = if self.cfg.verify_params {
            Some(self.fusion.fused_digest(&next)?)
        } else {
            None
        };
        let entry = {
            let mut store = self.store.lock().unwrap();
            match self.cfg.broadcast {
                Broadcast::Delta => store.put_checkpoint(&bytes)?,
                Broadcast::Full => store.put_full(&bytes)?,
            }
        };
        self.params = next;
        Ok(TrainOutput {
            step,
            hash: entry.body_hash,
            len: bytes.len() as u64,
            nnz,
            rho: changed as f64 / self.params.total_elements() as f64,
            index_bytes,
            digest,
            frames: Arc::new(frames),
            started,
            ended: Instant::now(),
        })
    }
}

fn frames_of(bytes: &[u8], version: u64, segment_size: usize) -> anyhow::Result<Arc<Vec<(u32, FrameBytes)>>> {
    Ok(Arc::new(
        segmentize(bytes, version, segment_size)?
            .into_iter()
            .map(|s| (s.segment_id, Arc::new(s.to_frame())))
            .collect(),
    ))
}

struct HubState {
    cfg: HubConfig,
    events: EventLog,
    progress: Arc<Progress>,
    tx: Sender<Inbound>,
    ledger: JobLedger,
    store: Arc<Mutex<CheckpointStore>>,
    trainer_tx: Option<Sender<u64>>,
    peers: BTreeMap<ActorId, Peer>,
    artifacts: BTreeMap<u64, Arc<Artifact>>,
    latest: u64,
    hashes: BTreeMap<u64, Digest>,
    digests: BTreeMap<u64, Digest>,
    collections: BTreeMap<u64, Collection>,
    job_collection: HashMap<u64, u64>,
    /// Version the newest collection runs on; commits never go past it.
    collection_version: u64,
    ready_since: Option<Instant>,
    trainer_busy: bool,
    trained: u64,
    cast: Option<CastState>,
    outputs: BTreeMap<u64, TrainOutput>,
    step_end: BTreeMap<u64, Instant>,
    first_collection: Option<Instant>,
    report: HubReport,
    last_progress: Instant,
    registered: usize,
}

impl HubState {
    fn new(cfg: HubConfig, events: EventLog, progress: Arc<Progress>, tx: Sender<Inbound>) -> anyhow::Result<Self> {
        let mut store = CheckpointStore::open(&cfg.store_dir)?;
        let params = transformer_model(cfg.model_elements, cfg.element_type, cfg.seed);
        let fusion = FusionMap::transformer(&params)?;
        let (genesis_bytes, digest) = {
            let fused = fusion.fused_layout(&params)?;
            let digest = fused.digest();
            let snap = DeltaCheckpoint::snapshot(&fused, 0)?;
            drop(fused);
            (snap.to_bytes(), digest)
        };
        let entry = store.put_checkpoint(&genesis_bytes).context("store genesis")?;
        let frames = frames_of(&genesis_bytes, 0, cfg.segment_size)?;
        let len = genesis_bytes.len() as u64;
        drop(genesis_bytes);
        let mut artifacts = BTreeMap::new();
        artifacts.insert(
            0,
            Arc::new(Artifact {
                frames,
            }),
        );
        let store = Arc::new(Mutex::new(store));
        let mut trainer = Trainer {
            gen: UpdateGenerator::new(cfg.seed, cfg.rho, cfg.cluster_fraction, cfg.mean_run),
            cfg: cfg.clone(),
            params,
            fusion,
            store: store.clone(),
        };
        let (ttx, trx) = unbounded::<u64>();
        let out = tx.clone();
        thread::Builder::new().name("trainer".into()).spawn(move || {
            for step in trx.iter() {
                match trainer.train(step, &out) {
                    Ok(o) => {
                        let _ = out.send(Inbound::Trained(Box::new(o)));
                    }
                    Err(e) => {
                        let _ = out.send(Inbound::TrainFailed(format!("{e:#}")));
                    }
                }
            }
        })?;
        let mut report = HubReport {
            run_start_us: events.now_us(),
            ..HubReport::default()
        };
        report.artifact_bytes.insert(0, len);
        let mut hashes = BTreeMap::new();
        hashes.insert(0, entry.body_hash);
        let mut digests = BTreeMap::new();
        digests.insert(0, digest);
        Ok(Self {
            ledger: JobLedger::new(cfg.scheduler, cfg.lease, cfg.initial_tau),
            cfg,
            events,
            progress,
            tx,
            store,
            trainer_tx: Some(ttx),
            peers: BTreeMap::new(),
            artifacts,
            latest: 0,
            hashes,
            digests,
            collections: BTreeMap::new(),
            job_collection: HashMap::new(),
            collection_version: 0,
            ready_since: None,
            trainer_busy: false,
            trained: 0,
            cast: None,
            outputs: BTreeMap::new(),
            step_end: BTreeMap::new(),
            first_collection: None,
            report,
            last_progress: Instant::now(),
            registered: 0,
        })
    }

    fn now(&self) -> Micros {
        Micros(self.events.now_us())
    }

    fn micros(&self, at: Instant) -> Micros {
        Micros(self.events.micros(at))
    }

    fn run(&mut self, rx: &Receiver<Inbound>) -> anyhow::Result<()> {
        let tick = Duration::from_millis(10);
        let mut next_tick = Instant::now();
        loop {
            if self.progress.abort.load(Ordering::Relaxed) {
                bail!("run aborted");
            }
            let wait = next_tick.saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Ok(m) => self.handle(m)?,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => bail!("hub channel closed"),
            }
            while let Ok(m) = rx.try_recv() {
                self.handle(m)?;
            }
            if Instant::now() >= next_tick {
                next_tick = Instant::now() + tick;
                if self.tick()? {
                    return Ok(());
                }
            }
        }
    }

    fn handle(&mut self, m: Inbound) -> anyhow::Result<()> {
        match m {
            Inbound::Connected {
                actor_id,
                conn,
                is_relay,
                region,
                data_addr,
                control,
            } => self.on_connect(actor_id, conn, is_relay, region, data_addr, control),
            Inbound::Message { actor_id, conn, msg, at } => {
                if self.peers.get(&actor_id).is_some_and(|p| p.conn == conn) {
                    self.on_message(actor_id, msg, at)?;
                }
            }
            Inbound::Disconnected { actor_id, conn } => {
                if self.peers.get(&actor_id).is_some_and(|p| p.conn == conn) {
                    let p = self.peers.remove(&actor_id).unwrap();
                    p.close();
                    self.ledger.mark_dead(actor_id);
                    self.events.record(actor_id, EventKind::ActorDead, 0, 0.0);
                    log::info!("actor {actor_id} disconnected");
                }
            }
            Inbound::Status {
                actor_id,
                version,
                status,
                missing,
            } => self.on_status(actor_id, version, status, missing),
            Inbound::Segment { version, id, frame } => self.on_segment(version, id, frame),
            Inbound::Trained(o) => self.on_trained(*o),
            Inbound::TrainFailed(e) => bail!("training failed: {e}"),
        }
        Ok(())
    }

    fn on_connect(
        &mut self,
        actor_id: ActorId,
        conn: u64,
        is_relay: bool,
        region: String,
        data_addr: String,
        control: ControlSender,
    ) {
        if self.ledger.actor(actor_id).is_some_and(|a| a.live) && self.peers.contains_key(&actor_id) {
            log::warn!("duplicate registration for actor {actor_id}");
            control.close();
            return;
        }
        if !self.cfg.links.contains_key(&region) {
            log::warn!("actor {actor_id} registered for unknown region {region}");
            control.close();
            return;
        }
        let now = self.now();
        if self.ledger.register_actor(actor_id, region.clone(), is_relay, now).is_err() {
            control.close();
            return;
        }
        let tx = self.tx.clone();
        let data = data_addr.parse::<SocketAddr>().ok().and_then(|addr| {
            let cfg = OutboundConfig {
                streams: self.cfg.streams.max(1),
                link: self.cfg.links.get(&region).cloned(),
                seed: self.cfg.seed,
                hello: Hello::new(Role::Hub, 0),
                connect_timeout: Duration::from_secs(5),
            };
            let reply: crate::transport::ReplyFn = Arc::new(move |peer, frame| {
                if let DataFrame::StatusReply {
                    version,
                    status,
                    missing,
                } = frame
                {
                    let _ = tx.send(Inbound::Status {
                        actor_id: peer,
                        version,
                        status,
                        missing,
                    });
                }
            });
            match Outbound::connect(addr, actor_id, &cfg, Some(reply)) {
                Ok(o) => Some(Arc::new(o)),
                Err(e) => {
                    log::warn!("data connection to actor {actor_id} failed: {e}");
                    None
                }
            }
        });
        if let Some(old) = self.peers.remove(&actor_id) {
            old.close();
        }
        self.peers.insert(
            actor_id,
            Peer {
                conn,
                control,
                data,
                region,
                is_relay,
                transfers: BTreeMap::new(),
                commit_sent: BTreeMap::new(),
                dead_logged: false,
            },
        );
        self.registered += 1;
        self.events.record(actor_id, EventKind::ActorRegistered, 0, is_relay as u8 as f64);
    }

    fn on_message(&mut self, actor_id: ActorId, msg: ControlMessage, at: Instant) -> anyhow::Result<()> {
        let at_us = self.micros(at);
        match msg {
            ControlMessage::Heartbeat {
                active_version,
                generating,
                staged,
                ..
            } => {
                let known = self.ledger.actor(actor_id).map(|a| a.active_version);
                let active = match known {
                    Some(k) if rank(k) > rank(active_version) => k,
                    _ => active_version,
                };
                self.ledger.heartbeat(actor_id, active, generating, &staged, at_us);
                if let Some(a) = self.ledger.actor_mut(actor_id) {
                    a.live = true;
                }
                if let Some(p) = self.peers.get_mut(&actor_id) {
                    p.dead_logged = false;
                }
            }
            ControlMessage::CommitAck { version, .. } => {
                self.ledger.commit_acked(actor_id, version, at_us);
                if let Some(a) = self.ledger.actor_mut(actor_id) {
                    a.live = true;
                }
            }
            ControlMessage::SubmitResult(r) => self.on_result(actor_id, r, at_us)?,
            other => log::debug!("hub: ignoring message type {} from {actor_id}", other.type_code()),
        }
        Ok(())
    }

    fn on_result(&mut self, actor_id: ActorId, r: sparsync_core::wire::ResultMsg, arrival: Micros) -> anyhow::Result<()> {
        let report = ResultReport {
            job_id: r.job_id,
            actor_id,
            behavior_version: r.behavior_version,
            reported_hash: r.reported_hash,
            arrival,
            token_count: r.token_count,
        };
        let Ok(s) = self.ledger.accept_result(&report) else {
            *self.report.rejected.entry("unknown_job".into()).or_default() += 1;
            return Ok(());
        };
        let k = self.job_collection.get(&r.job_id).copied();
        match s.verdict {
            Verdict::Accept => {
                self.report.accepted_total += 1;
                self.report.tokens_total += r.token_count;
                if let Some(c) = k.and_then(|k| self.collections.get_mut(&k)) {
                    c.accepted += 1;
                    c.tokens += r.token_count;
                    if r.behavior_version != c.version {
                        self.report.invariants.off_collection_accepted += 1;
                    }
                }
                if self.cfg.verify_params {
                    if let Some(d) = self.digests.get(&r.behavior_version) {
                        if *d != r.params_digest {
                            self.report.invariants.param_digest_mismatches += 1;
                        }
                    }
                }
                self.store.lock().unwrap().append_rollouts(&RolloutBatch {
                    job_id: r.job_id,
                    actor_id,
                    behavior_version: r.behavior_version,
                    token_count: r.token_count,
                    submitted_at_us: arrival.0,
                    payload: r.payload,
                })?;
                self.last_progress = Instant::now();
            }
            Verdict::Reject(reason) => {
                *self.report.rejected.entry(reason.as_str().into()).or_default() += 1;
                if let Some(c) = k.and_then(|k| self.collections.get_mut(&k)) {
                    c.rejected += 1;
                }
            }
        }
        Ok(())
    }

    fn on_status(&mut self, actor_id: ActorId, version: u64, status: StageStatus, missing: Vec<u32>) {
        let Some(art) = self.artifacts.get(&version).cloned() else { return };
        let Some(p) = self.peers.get_mut(&actor_id) else { return };
        let Some(data) = p.data.clone() else { return };
        match status {
            StageStatus::Missing | StageStatus::HashMismatch => {
                let resend: Vec<&(u32, FrameBytes)> = if status == StageStatus::HashMismatch || missing == [0] {
                    art.frames.iter().collect()
                } else {
                    art.frames.iter().filter(|(id, _)| missing.contains(id)).collect()
                };
                log::info!("resending {} segments of v{version} to actor {actor_id}", resend.len());
                for (id, f) in resend {
                    data.send_segment(*id, f.clone(), version);
                }
                if let Some(t) = p.transfers.get_mut(&version) {
                    t.started = Instant::now();
                    t.via = None;
                }
            }
            StageStatus::Refused => {
                p.transfers.remove(&version);
            }
            StageStatus::Complete => {}
        }
    }

    /// First segment of a freshly trained version: picks the receivers.
    fn on_segment(&mut self, version: u64, id: u32, frame: FrameBytes) {
        if self.cast.as_ref().map(|c| c.version) != Some(version) {
            let targets: Vec<ActorId> = self
                .peers
                .keys()
                .copied()
                .filter(|a| {
                    self.ledger
                        .actor(*a)
                        .is_some_and(|r| r.live && r.active_version == version - 1)
                })
                .collect();
            let outs = self.route(version, &targets);
            self.cast = Some(CastState { version, targets: outs });
        }
        let cast = self.cast.as_ref().unwrap();
        for out in &cast.targets {
            out.send_segment(id, frame.clone(), version);
        }
    }

    /// Registers transfers of `version` to `targets`, sending through a live
    /// regional relay when possible. Returns the connections to send on.
    fn route(&mut self, version: u64, targets: &[ActorId]) -> Vec<Arc<Outbound>> {
        let mut outs = Vec::new();
        let mut relay_of: BTreeMap<String, ActorId> = BTreeMap::new();
        if self.cfg.relay_enabled {
            for &t in targets {
                let p = &self.peers[&t];
                if p.is_relay && p.data.as_ref().is_some_and(|d| d.is_alive()) {
                    relay_of.entry(p.region.clone()).or_insert(t);
                }
            }
        }
        let now = Instant::now();
        for &t in targets {
            let p = self.peers.get_mut(&t).unwrap();
            let Some(data) = p.data.clone() else { continue };
            let via = relay_of.get(&p.region).copied().filter(|&r| r != t);
            p.transfers.insert(version, Transfer { started: now, via });
            self.events.record(t, EventKind::SendStart, version, via.unwrap_or(0) as f64);
            if via.is_none() {
                outs.push(data);
            }
        }
        outs
    }

    fn on_trained(&mut self, o: TrainOutput) {
        let v = o.step;
        self.events.record_at(o.ended, HUB_NODE, EventKind::TrainEnd, v, o.len as f64);
        self.artifacts.insert(
            v,
            Arc::new(Artifact {
                frames: o.frames.clone(),
            }),
        );
        // keep the last few versions in memory; older ones come from disk
        let keep_from = v.saturating_sub(2);
        self.artifacts.retain(|&k, _| k >= keep_from);
        self.latest = v;
        self.hashes.insert(v, o.hash);
        if let Some(d) = o.digest {
            self.digests.insert(v, d);
        }
        self.report.artifact_bytes.insert(v, o.len);
        self.step_end.insert(v, o.ended);
        self.trainer_busy = false;
        self.trained = v;
        self.cast = None;
        self.progress.steps_done.store(v, Ordering::SeqCst);
        self.last_progress = Instant::now();
        self.outputs.insert(v, o);
    }

    fn artifact(&mut self, v: u64) -> anyhow::Result<Arc<Artifact>> {
        if let Some(a) = self.artifacts.get(&v) {
            return Ok(a.clone());
        }
        let bytes = {
            let store = self.store.lock().unwrap();
            if v == 0 || self.cfg.broadcast == Broadcast::Delta {
                store.get_checkpoint(v)?
            } else {
                store.get_full(v)?
            }
        };
        let a = Arc::new(Artifact {
            frames: frames_of(&bytes, v, self.cfg.segment_size)?,
        });
        self.artifacts.insert(v, a.clone());
        Ok(a)
    }

    /// Returns true when the run is complete.
    fn tick(&mut self) -> anyhow::Result<bool> {
        let now_i = Instant::now();
        let now = self.micros(now_i);
        let expired = self.ledger.expire_leases(now);
        if expired > 0 {
            self.report.expired_prompts += expired as u64;
            self.events.record(HUB_NODE, EventKind::LeaseExpired, self.collection_version, expired as f64);
        }
        self.check_liveness(now);
        self.sync_transfers(now_i)?;
        self.sync_commits(now_i);
        self.advance_collections(now_i)?;
        self.advance_training();
        if self.trained >= self.cfg.steps {
            return Ok(true);
        }
        if now_i.duration_since(self.last_progress) > self.cfg.stall_timeout {
            bail!(
                "schedule stall: no progress for {:?} (collection version {})",
                self.cfg.stall_timeout,
                self.collection_version
            );
        }
        Ok(false)
    }

    fn check_liveness(&mut self, now: Micros) {
        let timeout = self.cfg.heartbeat_timeout.as_micros() as u64;
        let ids: Vec<ActorId> = self.peers.keys().copied().collect();
        for id in ids {
            let Some(a) = self.ledger.actor(id) else { continue };
            if a.live && now.0.saturating_sub(a.last_seen_us) > timeout {
                self.ledger.mark_dead(id);
                let p = self.peers.get_mut(&id).unwrap();
                if !p.dead_logged {
                    p.dead_logged = true;
                    self.events.record(id, EventKind::ActorDead, 1, 0.0);
                    log::info!("actor {id} missed heartbeats");
                }
            }
        }
    }

    fn sync_transfers(&mut self, now: Instant) -> anyhow::Result<()> {
        let dead_relays: Vec<ActorId> = self
            .peers
            .iter()
            .filter(|(_, p)| p.is_relay)
            .map(|(id, _)| *id)
            .filter(|id| !self.ledger.actor(*id).is_some_and(|a| a.live))
            .collect();
        // relays first so regional peers can ride on their transfer
        let mut ids: Vec<ActorId> = self.peers.keys().copied().collect();
        let known = ids.clone();
        ids.sort_by_key(|id| (!self.peers[id].is_relay, *id));
        for id in ids {
            let Some(rec) = self.ledger.actor(id).cloned() else { continue };
            let p = self.peers.get_mut(&id).unwrap();
            p.transfers
                .retain(|&v, _| !(rec.staged_versions.contains(&v) || rank(rec.active_version) >= rank(v)));
            if !rec.live {
                continue;
            }
            let next = rec.active_version.wrapping_add(1);
            if next > self.latest || rec.staged_versions.contains(&next) {
                continue;
            }
            if self.cast.as_ref().is_some_and(|c| c.version == next) {
                continue;
            }
            let Some(data) = p.data.clone() else { continue };
            let mut resend = false;
            match p.transfers.get(&next) {
                None => resend = true,
                Some(t) => {
                    if t.via.is_some_and(|r| dead_relays.contains(&r) || !known.contains(&r)) {
                        resend = true;
                    } else if now.duration_since(t.started) > self.cfg.transfer_timeout {
                        data.send_data_frame(&DataFrame::StatusQuery { version: next });
                        p.transfers.get_mut(&next).unwrap().started = now;
                    }
                }
            }
            if !resend {
                continue;
            }
            let via = if self.cfg.relay_enabled && !rec.is_relay {
                let region = p.region.clone();
                self.peers
                    .iter()
                    .find(|(rid, rp)| {
                        rp.is_relay
                            && rp.region == region
                            && rp.transfers.get(&next).is_some_and(|t| now.duration_since(t.started) < Duration::from_millis(50))
                            && self.ledger.actor(**rid).is_some_and(|a| a.live)
                    })
                    .map(|(rid, _)| *rid)
            } else {
                None
            };
            let art = self.artifact(next)?;
            let p = self.peers.get_mut(&id).unwrap();
            p.transfers.insert(next, Transfer { started: now, via });
            self.events.record(id, EventKind::SendStart, next, via.unwrap_or(0) as f64);
            if via.is_none() {
                for (sid, f) in art.frames.iter() {
                    data.send_segment(*sid, f.clone(), next);
                }
            }
        }
        Ok(())
    }

    fn sync_commits(&mut self, now: Instant) {
        let limit = self.collection_version;
        let mut ids: Vec<ActorId> = self.peers.keys().copied().collect();
        ids.sort_by_key(|id| (!self.peers[id].is_relay, *id));
        for id in ids {
            let Some(rec) = self.ledger.actor(id).cloned() else { continue };
            if !rec.live {
                continue;
            }
            let next = rec.active_version.wrapping_add(1);
            if rank(next) > rank(limit) || !rec.staged_versions.contains(&next) {
                continue;
            }
            let p = &self.peers[&id];
            if p.commit_sent
                .get(&next)
                .is_some_and(|t| now.duration_since(*t) < self.cfg.commit_timeout)
            {
                continue;
            }
            let mut propagate = Vec::new();
            if rec.is_relay && self.cfg.relay_enabled {
                let region = p.region.clone();
                for (pid, pp) in &self.peers {
                    if *pid == id || pp.is_relay || pp.region != region {
                        continue;
                    }
                    let Some(pr) = self.ledger.actor(*pid) else { continue };
                    let fresh = pp
                        .commit_sent
                        .get(&next)
                        .is_some_and(|t| now.duration_since(*t) < self.cfg.commit_timeout);
                    if pr.live && pr.active_version.wrapping_add(1) == next && pr.staged_versions.contains(&next) && !fresh
                    {
                        propagate.push(*pid);
                    }
                }
            }
            for pid in &propagate {
                self.peers.get_mut(pid).unwrap().commit_sent.insert(next, now);
            }
            let p = self.peers.get_mut(&id).unwrap();
            p.commit_sent.insert(next, now);
            p.control.send(&ControlMessage::Commit {
                version: next,
                propagate: propagate.clone(),
            });
            self.events.record(id, EventKind::CommitSent, next, propagate.len() as f64);
        }
    }

    fn outstanding_in(&self, k: u64) -> u32 {
        self.ledger
            .jobs()
            .filter(|j| j.state == JobState::Issued && self.job_collection.get(&j.job_id) == Some(&k))
            .count() as u32
    }

    fn advance_collections(&mut self, now: Instant) -> anyhow::Result<()> {
        let current = self.collections.keys().next_back().copied();
        let open = current.filter(|k| self.collections[k].ended.is_none());
        if let Some(k) = open {
            let c = &self.collections[&k];
            let batch = self.cfg.scheduler.batch;
            if c.accepted >= batch {
                let v = c.version;
                self.ledger.close_version(v);
                let c = self.collections.get_mut(&k).unwrap();
                c.ended = Some(now);
                self.events.record_at(now, HUB_NODE, EventKind::CollectionEnd, v, k as f64);
                return Ok(());
            }
            let deficit = batch - c.accepted - self.outstanding_in(k).min(batch - c.accepted);
            if deficit > 0 {
                self.issue(k, deficit, true)?;
            }
            return Ok(());
        }
        let k = current.map_or(1, |k| k + 1);
        if k > self.cfg.steps {
            return Ok(());
        }
        let v = k.saturating_sub(2);
        if v > self.latest || self.registered < self.cfg.expected_actors {
            self.ready_since = None;
            return Ok(());
        }
        self.collection_version = v;
        let ready = *self.ready_since.get_or_insert(now);
        let live: Vec<_> = self.ledger.actors().filter(|a| a.live).collect();
        let any = live.iter().any(|a| a.eligible_for(v));
        let all = live.iter().all(|a| a.eligible_for(v));
        // an actor still receiving v is worth waiting for, up to the transfer timeout
        let in_flight = live
            .iter()
            .any(|a| !a.eligible_for(v) && self.peers.get(&a.actor_id).is_some_and(|p| p.transfers.contains_key(&v)));
        let grace = if in_flight {
            self.cfg.allocation_grace.max(self.cfg.transfer_timeout)
        } else {
            self.cfg.allocation_grace
        };
        if !any || (!all && now.duration_since(ready) < grace) {
            return Ok(());
        }
        self.ready_since = None;
        self.collections.insert(
            k,
            Collection {
                version: v,
                started: now,
                ended: None,
                accepted: 0,
                rejected: 0,
                tokens: 0,
            },
        );
        self.first_collection.get_or_insert(now);
        self.progress.collection_started.store(k, Ordering::SeqCst);
        self.events.record_at(now, HUB_NODE, EventKind::CollectionStart, v, k as f64);
        self.last_progress = now;
        // commits for the new version precede the jobs on every control stream
        self.sync_commits(now);
        self.issue(k, self.cfg.scheduler.batch, false)
    }

    fn issue(&mut self, k: u64, count: u32, topup: bool) -> anyhow::Result<()> {
        let v = self.collections[&k].version;
        let before: BTreeMap<ActorId, f64> = self.ledger.actors().map(|a| (a.actor_id, a.tau)).collect();
        let outcome = match self.ledger.allocate_batch(v, count) {
            Ok(o) => o,
            Err(ScheduleError::NoEligible(_)) => return Ok(()),
            Err(e) => bail!("{e}"),
        };
        for a in self.ledger.actors() {
            self.report.allocations.push(AllocationRow {
                step: k,
                version: v,
                topup,
                actor: a.actor_id,
                tau: before.get(&a.actor_id).copied().unwrap_or(a.tau),
                share: outcome.allocation.share(a.actor_id),
                eligible: !outcome.excluded.contains(&a.actor_id),
                excluded: outcome.excluded.contains(&a.actor_id),
            });
        }
        for &x in &outcome.excluded {
            if let Some(p) = self.peers.get(&x) {
                p.control.send(&ControlMessage::ExcludedNotice { version: v });
            }
        }
        // commit targets whose commit is not yet out get it ahead of jobs
        self.sync_commits(Instant::now());
        let hash = self.hashes[&v];
        let jobs = self.ledger.issue_jobs(v, hash, &outcome.allocation.shares, self.now())?;
        let mut by_actor: BTreeMap<ActorId, Vec<JobSpec>> = BTreeMap::new();
        for j in jobs {
            self.job_collection.insert(j.job_id, k);
            by_actor.entry(j.actor_id).or_default().push(JobSpec {
                job_id: j.job_id,
                target_version: j.target_version,
                expected_hash: j.expected_hash,
                lease_expiry_us: j.lease_expiry.0,
                tokens_per_prompt: self.cfg.tokens_per_prompt,
                prompt_ids: j.prompt_ids,
            });
        }
        for (a, specs) in by_actor {
            if let Some(p) = self.peers.get(&a) {
                p.control.send(&ControlMessage::IssueJobs(specs));
            }
        }
        Ok(())
    }

    fn advance_training(&mut self) {
        if self.trainer_busy {
            return;
        }
        let next = self.trained + 1;
        if next > self.cfg.steps {
            return;
        }
        if self.collections.get(&next).is_some_and(|c| c.ended.is_some()) {
            self.trainer_busy = true;
            self.events.record(HUB_NODE, EventKind::TrainStart, next, 0.0);
            if let Some(t) = &self.trainer_tx {
                let _ = t.send(next);
            }
        }
    }

    fn shutdown(&mut self) {
        self.trainer_tx = None;
        for p in self.peers.values() {
            if let Some(d) = &p.data {
                d.wait_drained(Duration::from_secs(2));
            }
        }
    }

    fn report(&mut self) -> HubReport {
        let mut r = std::mem::take(&mut self.report);
        let ledger = self.ledger.invariants();
        let extra = r.invariants;
        r.invariants = Invariants {
            off_collection_accepted: extra.off_collection_accepted,
            param_digest_mismatches: extra.param_digest_mismatches,
            ..Invariants::from_ledger(ledger)
        };
        let mut prev_end = self.first_collection.unwrap_or_else(Instant::now);
        for (&k, o) in &self.outputs {
            let c = self.collections.get(&k);
            let collection_s = c
                .and_then(|c| c.ended.map(|e| e.duration_since(c.started).as_secs_f64()))
                .unwrap_or(0.0);
            r.steps.push(StepMetrics {
                step: k,
                version: k,
                collection_version: c.map_or(0, |c| c.version),
                wall_s: o.ended.saturating_duration_since(prev_end).as_secs_f64(),
                collection_s,
                train_s: o.ended.duration_since(o.started).as_secs_f64(),
                payload_bytes: o.len,
                nnz: o.nnz,
                rho: o.rho,
                index_bytes: o.index_bytes,
                tokens: c.map_or(0, |c| c.tokens),
                accepted: c.map_or(0, |c| c.accepted),
                rejected: c.map_or(0, |c| c.rejected),
            });
            prev_end = o.ended;
        }
        r.total_wall_s = self
            .outputs
            .values()
            .next_back()
            .map(|o| o.ended.saturating_duration_since(self.first_collection.unwrap_or(o.ended)).as_secs_f64())
            .unwrap_or(0.0);
        r.digests = self.digests.clone();
        r.hashes = self.hashes.clone();
        r
    }
}

impl Drop for HubState {
    fn drop(&mut self) {
        for p in self.peers.values() {
            p.close();
        }
    }
}
