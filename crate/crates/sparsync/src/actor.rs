//! Rollout actor and relay.
//!
//! Two activities run side by side: the generation loop, which owns the
//! parameters and only touches them at batch boundaries, and the network
//! side, which stages the next version as its segments arrive. A relay is
//! an actor that also forwards every segment it receives to its regional
//! peers before reassembling it itself.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::io::BufReader;
use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsync_core::codec::{apply_view, layout_from_view};
use sparsync_core::hash::Digest;
use sparsync_core::scheduler::NO_VERSION;
use sparsync_core::segment::UNKNOWN_TOTAL;
use sparsync_core::wire::{ControlMessage, DataFrame, Hello, JobSpec, ResultMsg, Role};
use sparsync_core::{CheckpointView, ParameterSet};

use crate::control::{read_control, ControlSender};
use crate::events::{EventKind, EventLog};
use crate::link::Link;
use crate::transport::{DataListener, FrameHandler, Outbound, OutboundConfig, ReplyHandle, StageEvent, StagingArea};

#[derive(Clone)]
pub struct ActorConfig {
    pub actor_id: u64,
    pub region: String,
    pub is_relay: bool,
    /// True generation speed in tokens per second.
    pub tau_true: f64,
    /// Relative per-job speed noise, uniform in `[-jitter, +jitter]`.
    pub jitter: f64,
    pub hub: SocketAddr,
    pub data_listen: String,
    /// Regional peers a relay forwards to.
    pub peers: Vec<(u64, SocketAddr)>,
    pub streams: usize,
    /// Region link; delays and partitions the control channel.
    pub link: Option<Arc<Link>>,
    pub seed: u64,
    /// Recompute the parameter digest after every activation.
    pub verify_params: bool,
    pub heartbeat_interval: Duration,
}

/// Order key that puts "no version" before version 0.
pub fn rank(v: u64) -> u64 {
    v.wrapping_add(1)
}

#[derive(Default)]
struct Forwarding {
    seen: HashSet<(u64, u32)>,
    started: HashSet<u64>,
    totals: HashMap<u64, u32>,
    counts: HashMap<u64, u32>,
}

struct Params {
    params: Option<ParameterSet>,
    active_hash: Digest,
    params_digest: Digest,
}

struct Shared {
    cfg: ActorConfig,
    events: EventLog,
    killed: AtomicBool,
    active: AtomicU64,
    generating: AtomicBool,
    staging: Arc<StagingArea>,
    commits: Mutex<BTreeSet<u64>>,
    jobs: Mutex<VecDeque<JobSpec>>,
    wake: Condvar,
    hb: (Mutex<bool>, Condvar),
    control: ControlSender,
    peers: Mutex<BTreeMap<u64, Outbound>>,
    forwarding: Mutex<Forwarding>,
    state: Mutex<Params>,
    results_sent: AtomicU64,
}

impl Shared {
    fn killed(&self) -> bool {
        self.killed.load(Ordering::Relaxed)
    }

    fn active(&self) -> u64 {
        self.active.load(Ordering::SeqCst)
    }

    fn poke(&self) {
        let _g = self.jobs.lock().unwrap();
        self.wake.notify_all();
    }

    fn poke_heartbeat(&self) {
        *self.hb.0.lock().unwrap() = true;
        self.hb.1.notify_all();
    }

    fn heartbeat(&self) {
        self.control.send(&ControlMessage::Heartbeat {
            actor_id: self.cfg.actor_id,
            active_version: self.active(),
            generating: self.generating.load(Ordering::Relaxed),
            staged: self.staging.verified_versions(),
        });
    }

    fn add_commit(&self, version: u64) {
        if rank(version) > rank(self.active()) {
            self.commits.lock().unwrap().insert(version);
        }
        self.poke();
    }

    fn forward(&self, seg: &sparsync_core::segment::Segment) {
        let id = self.cfg.actor_id;
        let v = seg.version;
        let (first, last) = {
            let mut f = self.forwarding.lock().unwrap();
            if !f.seen.insert((v, seg.segment_id)) {
                return;
            }
            let first = f.started.insert(v);
            if seg.total_segments != UNKNOWN_TOTAL {
                f.totals.insert(v, seg.total_segments);
            }
            let c = f.counts.entry(v).or_default();
            *c += 1;
            let c = *c;
            (first, f.totals.get(&v).is_some_and(|&t| c == t + 1))
        };
        let frame = Arc::new(seg.to_frame());
        if first {
            self.events.record(id, EventKind::RelayForwardFirst, v, 0.0);
        }
        for out in self.peers.lock().unwrap().values() {
            out.send_segment(seg.segment_id, frame.clone(), v);
        }
        if last {
            self.events.record(id, EventKind::RelayReceiveLast, v, 0.0);
        }
    }
}

struct DataHandler(Arc<Shared>);

impl FrameHandler for DataHandler {
    fn on_frame(&self, _from: &Hello, frame: DataFrame, reply: &ReplyHandle) {
        let s = &self.0;
        if s.killed() {
            return;
        }
        let id = s.cfg.actor_id;
        match frame {
            DataFrame::Segment(seg) => {
                if s.cfg.is_relay && seg.crc_ok() {
                    s.forward(&seg);
                }
                let ev = s.staging.insert(&seg);
                if matches!(
                    ev,
                    StageEvent::Started
                        | StageEvent::Verified { started: true, .. }
                        | StageEvent::HashMismatch { started: true }
                ) {
                    s.events.record(id, EventKind::StageStart, seg.version, 0.0);
                }
                match ev {
                    StageEvent::Verified { .. } => {
                        s.events.record(id, EventKind::Staged, seg.version, 0.0);
                        s.poke_heartbeat();
                        s.poke();
                    }
                    StageEvent::HashMismatch { .. } => {
                        s.events.record(id, EventKind::StageHashMismatch, seg.version, 0.0);
                        log::warn!("actor {id}: version {} failed verification", seg.version);
                    }
                    _ => {}
                }
            }
            DataFrame::StatusQuery { version } => {
                let (status, missing) = s.staging.status(version);
                let _ = reply.send(&DataFrame::StatusReply {
                    version,
                    status,
                    missing,
                });
            }
            DataFrame::Commit { version } => s.add_commit(version),
            DataFrame::StatusReply { .. } => {}
        }
    }
}

/// A running actor; dropping the handle does not stop it, [`kill`] does.
///
/// [`kill`]: ActorHandle::kill
pub struct ActorHandle {
    shared: Arc<Shared>,
    data_addr: SocketAddr,
    listener: DataListener,
    threads: Vec<JoinHandle<()>>,
}

impl ActorHandle {
    pub fn start(cfg: ActorConfig, events: EventLog) -> anyhow::Result<Self> {
        let control = TcpStream::connect_timeout(&cfg.hub, Duration::from_secs(5)).context("connect to hub")?;
        control.set_nodelay(true)?;
        let staging = Arc::new(StagingArea::new(Some(0)));
        let reader = control.try_clone()?;
        let sender = ControlSender::spawn(control, cfg.link.clone())?;
        let shared = Arc::new(Shared {
            events,
            killed: AtomicBool::new(false),
            active: AtomicU64::new(NO_VERSION),
            generating: AtomicBool::new(false),
            staging,
            commits: Mutex::new(BTreeSet::new()),
            jobs: Mutex::new(VecDeque::new()),
            wake: Condvar::new(),
            hb: (Mutex::new(false), Condvar::new()),
            control: sender,
            peers: Mutex::new(BTreeMap::new()),
            forwarding: Mutex::new(Forwarding::default()),
            state: Mutex::new(Params {
                params: None,
                active_hash: Digest::default(),
                params_digest: Digest::default(),
            }),
            results_sent: AtomicU64::new(0),
            cfg,
        });
        let listener = DataListener::bind(&shared.cfg.data_listen, Arc::new(DataHandler(shared.clone())))?;
        let data_addr = listener.local_addr();
        shared.control.send(&ControlMessage::Register {
            actor_id: shared.cfg.actor_id,
            is_relay: shared.cfg.is_relay,
            region: shared.cfg.region.clone(),
            data_addr: data_addr.to_string(),
        });

        if shared.cfg.is_relay {
            let out_cfg = OutboundConfig {
                streams: shared.cfg.streams.max(1),
                link: None,
                seed: shared.cfg.seed,
                hello: Hello::new(Role::Relay, shared.cfg.actor_id),
                connect_timeout: Duration::from_secs(5),
            };
            let mut peers = shared.peers.lock().unwrap();
            for &(pid, addr) in &shared.cfg.peers {
                match Outbound::connect(addr, pid, &out_cfg, None) {
                    Ok(o) => {
                        peers.insert(pid, o);
                    }
                    Err(e) => log::warn!("relay {}: peer {pid} unreachable: {e}", shared.cfg.actor_id),
                }
            }
        }

        let mut threads = Vec::new();
        let s = shared.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("actor-{}-control", s.cfg.actor_id))
                .spawn(move || control_loop(s, reader))?,
        );
        let s = shared.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("actor-{}-hb", s.cfg.actor_id))
                .spawn(move || heartbeat_loop(s))?,
        );
        let s = shared.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("actor-{}-main", s.cfg.actor_id))
                .spawn(move || main_loop(s))?,
        );
        Ok(Self {
            shared,
            data_addr,
            listener,
            threads,
        })
    }

    pub fn id(&self) -> u64 {
        self.shared.cfg.actor_id
    }

    pub fn data_addr(&self) -> SocketAddr {
        self.data_addr
    }

    pub fn is_relay(&self) -> bool {
        self.shared.cfg.is_relay
    }

    pub fn active_version(&self) -> u64 {
        self.shared.active()
    }

    pub fn is_killed(&self) -> bool {
        self.shared.killed()
    }

    pub fn results_sent(&self) -> u64 {
        self.shared.results_sent.load(Ordering::Relaxed)
    }

    /// Digest of the fused-layout parameters at the last activation.
    pub fn params_digest(&self) -> Digest {
        self.shared.state.lock().unwrap().params_digest
    }

    pub fn with_params<R>(&self, f: impl FnOnce(Option<&ParameterSet>) -> R) -> R {
        f(self.shared.state.lock().unwrap().params.as_ref())
    }

    /// Simulates a crash: every socket closes and all threads stop.
    pub fn kill(&self) {
        let s = &self.shared;
        s.killed.store(true, Ordering::SeqCst);
        s.control.close();
        self.listener.close();
        for o in s.peers.lock().unwrap().values() {
            o.close();
        }
        s.poke();
        s.poke_heartbeat();
    }

    /// Blocks until the actor stops, for example because the hub went away.
    pub fn wait(&self) {
        while !self.is_killed() {
            thread::sleep(Duration::from_millis(50));
        }
    }

    pub fn join(mut self) {
        self.kill();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn control_loop(s: Arc<Shared>, stream: TcpStream) {
    let mut r = BufReader::new(stream);
    while !s.killed() {
        match read_control(&mut r) {
            Ok(ControlMessage::IssueJobs(jobs)) => {
                let mut q = s.jobs.lock().unwrap();
                q.extend(jobs);
                s.wake.notify_all();
            }
            Ok(ControlMessage::Commit { version, propagate }) => {
                if !propagate.is_empty() {
                    let peers = s.peers.lock().unwrap();
                    for p in &propagate {
                        if let Some(o) = peers.get(p) {
                            o.send_data_frame(&DataFrame::Commit { version });
                        }
                    }
                }
                s.add_commit(version);
            }
            Ok(ControlMessage::ExcludedNotice { version }) => {
                s.events.record(s.cfg.actor_id, EventKind::Excluded, version, 0.0);
            }
            Ok(other) => log::debug!("actor {}: ignoring {:?}", s.cfg.actor_id, other.type_code()),
            Err(_) => {
                if !s.killed() {
                    log::info!("actor {}: hub closed the control channel", s.cfg.actor_id);
                }
                s.killed.store(true, Ordering::SeqCst);
                s.poke();
                s.poke_heartbeat();
                break;
            }
        }
    }
}

fn heartbeat_loop(s: Arc<Shared>) {
    let (lock, cv) = &s.hb;
    while !s.killed() {
        s.heartbeat();
        let mut poked = lock.lock().unwrap();
        if !*poked {
            poked = cv.wait_timeout(poked, s.cfg.heartbeat_interval).unwrap().0;
        }
        *poked = false;
    }
}

/// Applies every committed, verified successor of the active version.
fn try_activate(s: &Shared) {
    loop {
        let active = s.active();
        let next = active.wrapping_add(1);
        if !s.commits.lock().unwrap().contains(&next) {
            return;
        }
        let Some(ver) = s.staging.verified(next) else { return };
        let result = (|| -> anyhow::Result<(Digest, Option<Digest>)> {
            let view = CheckpointView::parse_unverified(&ver.bytes)?;
            anyhow::ensure!(
                view.header().base_version == active,
                "version {next} is based on {}, active is {active}",
                view.header().base_version
            );
            let mut st = s.state.lock().unwrap();
            if st.params.is_none() {
                st.params = Some(layout_from_view(&view)?);
            }
            apply_view(st.params.as_mut().unwrap(), &view)?;
            let digest = s.cfg.verify_params.then(|| st.params.as_ref().unwrap().digest());
            Ok((view.header().body_hash, digest))
        })();
        match result {
            Ok((hash, digest)) => {
                {
                    let mut st = s.state.lock().unwrap();
                    st.active_hash = hash;
                    st.params_digest = digest.unwrap_or_default();
                }
                s.active.store(next, Ordering::SeqCst);
                s.staging.accept_only(next.wrapping_add(1));
                s.commits.lock().unwrap().retain(|&c| rank(c) > rank(next));
                s.events.record(s.cfg.actor_id, EventKind::Activated, next, 0.0);
                s.control.send(&ControlMessage::CommitAck {
                    actor_id: s.cfg.actor_id,
                    version: next,
                });
                s.poke_heartbeat();
            }
            Err(e) => {
                log::error!("actor {}: activation of {next} failed: {e:#}", s.cfg.actor_id);
                s.staging.reset(next);
                s.staging.take_verified(next);
                return;
            }
        }
    }
}

enum Next {
    Run(JobSpec),
    Wait,
}

fn next_job(s: &Shared) -> Next {
    let mut q = s.jobs.lock().unwrap();
    let active = rank(s.active());
    while let Some(front) = q.front() {
        let target = rank(front.target_version);
        if target == active {
            return Next::Run(q.pop_front().unwrap());
        }
        if target == active + 1 {
            break;
        }
        let dropped = q.pop_front().unwrap();
        log::debug!(
            "actor {}: dropping job {} for version {}",
            s.cfg.actor_id,
            dropped.job_id,
            dropped.target_version
        );
    }
    let _ = s.wake.wait_timeout(q, Duration::from_millis(20)).unwrap();
    Next::Wait
}

fn main_loop(s: Arc<Shared>) {
    let mut rng = ChaCha8Rng::seed_from_u64(s.cfg.seed ^ s.cfg.actor_id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let id = s.cfg.actor_id;
    while !s.killed() {
        // safe point: nothing is being generated here
        try_activate(&s);
        let job = match next_job(&s) {
            Next::Run(j) => j,
            Next::Wait => continue,
        };
        let version = s.active();
        let (hash, digest) = {
            let st = s.state.lock().unwrap();
            (st.active_hash, st.params_digest)
        };
        let tokens = job.tokens_per_prompt as u64 * job.prompt_ids.len() as u64;
        let noise = if s.cfg.jitter > 0.0 {
            rng.random_range(-s.cfg.jitter..=s.cfg.jitter)
        } else {
            0.0
        };
        let secs = tokens as f64 / s.cfg.tau_true * (1.0 + noise).max(0.05);
        s.generating.store(true, Ordering::Relaxed);
        let start = Instant::now();
        s.events.record(id, EventKind::GenerationStart, version, job.job_id as f64);
        let end = start + Duration::from_secs_f64(secs);
        while !s.killed() {
            let now = Instant::now();
            if now >= end {
                break;
            }
            thread::sleep((end - now).min(Duration::from_millis(20)));
        }
        s.generating.store(false, Ordering::Relaxed);
        if s.killed() {
            break;
        }
        s.events.record(id, EventKind::GenerationEnd, version, job.job_id as f64);
        let payload = job.prompt_ids.iter().flat_map(|p| p.to_le_bytes()).collect();
        s.control.send(&ControlMessage::SubmitResult(ResultMsg {
            job_id: job.job_id,
            actor_id: id,
            behavior_version: version,
            reported_hash: hash,
            params_digest: digest,
            token_count: tokens,
            gen_elapsed_us: start.elapsed().as_micros() as u64,
            payload,
        }));
        s.results_sent.fetch_add(1, Ordering::Relaxed);
    }
    s.generating.store(false, Ordering::Relaxed);
}
