//! Runs a scenario in-process: one hub, its actors and relays, emulated
//! region links and scheduled faults. Writes `steps.csv`,
//! `allocations.csv`, `summary.json` and `events.jsonl` to the run
//! directory.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::actor::{ActorConfig, ActorHandle};
use crate::events::{Event, EventKind, EventLog, HUB_NODE};
use crate::hub::{Hub, HubConfig, HubReport, Progress};
use crate::link::Link;
use crate::scenario::{FaultKind, FaultSpec, Scenario, ScenarioError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Invalid(#[from] ScenarioError),
    #[error("run failed: {0:#}")]
    Run(#[from] anyhow::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Invalid(_) => 2,
            HarnessError::Run(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkStats {
    pub name: String,
    pub payload_bytes: u64,
    pub wire_bytes: u64,
    pub drops: u64,
    pub bytes_by_version: BTreeMap<u64, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActorOutcome {
    pub id: u64,
    pub region: String,
    pub relay: bool,
    pub killed: bool,
    pub active_version: u64,
    pub results_sent: u64,
    /// Whether the actor's parameters at its final version equal the hub's.
    pub params_match: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferRow {
    pub actor: u64,
    pub version: u64,
    /// First send to staged-and-verified.
    pub seconds: f64,
    /// Relay the transfer went through, 0 for direct.
    pub via: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Overlap {
    /// Actor-versions with generation at `v` and staging of `v + 1`.
    pub checked: u64,
    /// Of those, how many started staging `v + 1` before the last batch on
    /// `v` ended.
    pub overlapped: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: Scenario,
    pub hub: HubReport,
    pub links: Vec<LinkStats>,
    pub actors: Vec<ActorOutcome>,
    pub transfers: Vec<TransferRow>,
    pub overlap: Overlap,
    pub faults_applied: Vec<String>,
    /// Accepted rollout tokens per second of wall time.
    pub throughput: f64,
    pub lag_violations: u64,
}

impl RunReport {
    pub fn total_wall_s(&self) -> f64 {
        self.hub.total_wall_s
    }

    pub fn link(&self, name: &str) -> Option<&LinkStats> {
        self.links.iter().find(|l| l.name == name)
    }

    pub fn all_params_match(&self) -> bool {
        self.actors.iter().filter(|a| !a.killed).all(|a| a.params_match != Some(false))
    }
}

struct Topology {
    actors: Vec<Arc<ActorHandle>>,
    links: BTreeMap<String, Arc<Link>>,
}

impl Topology {
    fn shutdown(self) {
        for a in &self.actors {
            a.kill();
        }
        for a in self.actors {
            if let Ok(a) = Arc::try_unwrap(a) {
                a.join();
            }
        }
    }
}

pub fn run_scenario(scenario: &Scenario, out: &Path) -> Result<RunReport, HarnessError> {
    scenario.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let store_dir = out.join("store");
    if store_dir.exists() {
        std::fs::remove_dir_all(&store_dir).context("clear old store")?;
    }
    let events = EventLog::with_file(&out.join("events.jsonl")).context("open event log")?;
    std::fs::write(out.join("scenario.toml"), scenario.to_toml()).context("write scenario copy")?;

    let links: BTreeMap<String, Arc<Link>> = scenario
        .regions
        .iter()
        .map(|r| (r.name.clone(), Link::new(r.name.clone(), r.link)))
        .collect();
    let hub = Hub::bind(hub_config(scenario, store_dir, links.clone()), "127.0.0.1:0", events.clone())?;
    let hub_addr = hub.addr();
    let progress = hub.progress();
    let hub_thread = thread::Builder::new()
        .name("hub".into())
        .spawn(move || hub.run())
        .context("spawn hub")?;

    let topo = match start_actors(scenario, hub_addr, &links, &events) {
        Ok(t) => t,
        Err(e) => {
            progress.abort.store(true, Ordering::SeqCst);
            let _ = hub_thread.join();
            return Err(e.into());
        }
    };
    let done = Arc::new(AtomicBool::new(false));
    let fault_thread = spawn_faults(scenario, &topo, progress.clone(), done.clone(), events.clone());

    let hub_result = hub_thread.join().unwrap_or_else(|_| Err(anyhow::anyhow!("hub panicked")));
    done.store(true, Ordering::SeqCst);
    let (faults_applied, fault_killed) = fault_thread.join().unwrap_or_default();
    let report = match hub_result {
        Ok(r) => r,
        Err(e) => {
            topo.shutdown();
            events.flush();
            return Err(e.into());
        }
    };
    // let the final activations land before sampling actor state
    settle(&topo, &report, &fault_killed, Duration::from_secs(5));
    let actors = outcomes(scenario, &topo, &report, &fault_killed);
    let links_out: Vec<LinkStats> = topo
        .links
        .values()
        .map(|l| LinkStats {
            name: l.name().to_string(),
            payload_bytes: l.bytes_sent(),
            wire_bytes: l.wire_bytes(),
            drops: l.drops(),
            bytes_by_version: l.bytes_by_version(),
        })
        .collect();
    topo.shutdown();
    events.flush();

    let timeline = events.snapshot();
    let throughput = if report.total_wall_s > 0.0 {
        report.tokens_total as f64 / report.total_wall_s
    } else {
        0.0
    };
    let lag_violations = report.invariants.violations();
    let run = RunReport {
        scenario: scenario.clone(),
        transfers: transfers(&timeline),
        overlap: overlap(&timeline),
        hub: report,
        links: links_out,
        actors,
        faults_applied,
        throughput,
        lag_violations,
    };
    write_outputs(&run, out)?;
    Ok(run)
}

/// Runs only the hub of a scenario on `listen`; actors are separate
/// processes. Faults are not injected in this mode.
pub fn run_hub_node(scenario: &Scenario, listen: &str, out: &Path) -> Result<HubReport, HarnessError> {
    scenario.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let events = EventLog::with_file(&out.join("events.jsonl")).context("open event log")?;
    let links: BTreeMap<String, Arc<Link>> = scenario
        .regions
        .iter()
        .map(|r| (r.name.clone(), Link::new(r.name.clone(), r.link)))
        .collect();
    let hub = Hub::bind(hub_config(scenario, out.join("store"), links), listen, events.clone())?;
    println!("hub listening on {}", hub.addr());
    let report = hub.run()?;
    events.flush();
    std::fs::write(out.join("hub_summary.json"), serde_json::to_vec_pretty(&report).context("encode")?)
        .context("write hub summary")?;
    Ok(report)
}

fn hub_config(s: &Scenario, store_dir: PathBuf, links: BTreeMap<String, Arc<Link>>) -> HubConfig {
    let t = &s.timing;
    HubConfig {
        broadcast: s.mode.broadcast(),
        steps: s.steps,
        tokens_per_prompt: s.tokens_per_prompt() as u32,
        scheduler: s.scheduler(),
        lease: s.lease(),
        initial_tau: s.scheduling.initial_tau,
        streams: s.effective_streams(),
        segment_size: s.segment_size,
        relay_enabled: s.relay_enabled,
        train_time: s.train_time(),
        heartbeat_timeout: s.duration(t.heartbeat_timeout_s),
        allocation_grace: s.duration(t.allocation_grace_s),
        transfer_timeout: s.duration(t.transfer_timeout_s),
        commit_timeout: s.duration(t.commit_timeout_s),
        stall_timeout: s.duration(t.stall_timeout_s),
        expected_actors: s.actors().len(),
        seed: s.seed,
        model_elements: s.model_elements,
        element_type: s.element_type.into(),
        rho: s.rho,
        cluster_fraction: s.cluster_fraction,
        mean_run: s.mean_run,
        delta_mode: s.delta_mode(),
        store_dir,
        links,
        verify_params: s.verify_params,
    }
}

fn start_actors(
    s: &Scenario,
    hub: SocketAddr,
    links: &BTreeMap<String, Arc<Link>>,
    events: &EventLog,
) -> anyhow::Result<Topology> {
    let placed = s.actors();
    let mut started: Vec<Arc<ActorHandle>> = Vec::new();
    let mut addrs: HashMap<u64, SocketAddr> = HashMap::new();
    let config = |id: u64, region: &str, tau: f64, jitter: f64, relay: bool, peers| ActorConfig {
        actor_id: id,
        region: region.to_string(),
        is_relay: relay,
        tau_true: tau,
        jitter,
        hub,
        data_listen: "127.0.0.1:0".into(),
        peers,
        streams: s.effective_streams(),
        link: links.get(region).cloned(),
        seed: s.seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        verify_params: s.verify_params,
        heartbeat_interval: s.duration(s.timing.heartbeat_interval_s),
    };
    // relays need their peers' data addresses, so they start last
    let relay_of = |a: &crate::scenario::PlacedActor| a.spec.relay && s.relay_enabled;
    for a in placed.iter().filter(|a| !relay_of(a)) {
        let h = ActorHandle::start(config(a.id, &a.region, a.spec.tau_true, a.spec.jitter, false, Vec::new()), events.clone())
            .with_context(|| format!("start actor {}", a.id))?;
        addrs.insert(a.id, h.data_addr());
        started.push(Arc::new(h));
    }
    for a in placed.iter().filter(|a| relay_of(a)) {
        let peers = placed
            .iter()
            .filter(|p| p.region == a.region && p.id != a.id)
            .map(|p| (p.id, addrs[&p.id]))
            .collect();
        let h = ActorHandle::start(config(a.id, &a.region, a.spec.tau_true, a.spec.jitter, true, peers), events.clone())
            .with_context(|| format!("start relay {}", a.id))?;
        started.push(Arc::new(h));
    }
    started.sort_by_key(|a| a.id());
    Ok(Topology {
        actors: started,
        links: links.clone(),
    })
}

fn spawn_faults(
    s: &Scenario,
    topo: &Topology,
    progress: Arc<Progress>,
    done: Arc<AtomicBool>,
    events: EventLog,
) -> thread::JoinHandle<(Vec<String>, Vec<u64>)> {
    let faults: Vec<FaultSpec> = s.faults.clone();
    let actors = topo.actors.clone();
    let links = topo.links.clone();
    let placed = s.actors();
    let relay_enabled = s.relay_enabled;
    thread::spawn(move || {
        let mut pending: Vec<(FaultSpec, Option<Instant>)> = faults.into_iter().map(|f| (f, None)).collect();
        let mut lifts: Vec<(Instant, Arc<Link>)> = Vec::new();
        let mut applied = Vec::new();
        let mut killed = Vec::new();
        while !done.load(Ordering::SeqCst) && !(pending.is_empty() && lifts.is_empty()) {
            let started = progress.collection_started.load(Ordering::SeqCst);
            let now = Instant::now();
            for (f, due) in pending.iter_mut() {
                if due.is_none() && started >= f.at_step {
                    *due = Some(now + Duration::from_secs_f64(f.delay_s.max(0.0)));
                }
            }
            let (fire, keep): (Vec<_>, Vec<_>) = pending.into_iter().partition(|(_, d)| d.is_some_and(|d| d <= now));
            pending = keep;
            for (f, _) in fire {
                let what = match f.kind {
                    FaultKind::KillActor => {
                        let id: u64 = f.target.parse().unwrap_or(0);
                        if let Some(a) = actors.iter().find(|a| a.id() == id) {
                            a.kill();
                            killed.push(id);
                        }
                        events.record(id, EventKind::Fault, started, 1.0);
                        format!("kill_actor {id} during collection {started}")
                    }
                    FaultKind::KillRelay => {
                        let relay = placed
                            .iter()
                            .find(|p| p.region == f.target && p.spec.relay && relay_enabled)
                            .map(|p| p.id);
                        if let Some(a) = relay.and_then(|id| actors.iter().find(|a| a.id() == id)) {
                            a.kill();
                            killed.push(a.id());
                        }
                        events.record(relay.unwrap_or(0), EventKind::Fault, started, 2.0);
                        format!("kill_relay {} in {} during collection {started}", relay.unwrap_or(0), f.target)
                    }
                    FaultKind::PartitionRegion => {
                        if let Some(l) = links.get(&f.target) {
                            l.set_partitioned(true);
                            lifts.push((now + Duration::from_secs_f64(f.duration_s.max(0.0)), l.clone()));
                        }
                        events.record(HUB_NODE, EventKind::Fault, started, 3.0);
                        format!("partition {} for {}s during collection {started}", f.target, f.duration_s)
                    }
                };
                log::info!("fault: {what}");
                applied.push(what);
            }
            lifts.retain(|(at, l)| {
                if *at <= now {
                    l.set_partitioned(false);
                    false
                } else {
                    true
                }
            });
            thread::sleep(Duration::from_millis(10));
        }
        for (_, l) in lifts {
            l.set_partitioned(false);
        }
        (applied, killed)
    })
}

fn settle(topo: &Topology, report: &HubReport, killed: &[u64], timeout: Duration) {
    let target = report.steps.last().map_or(0, |s| s.collection_version);
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        let behind = topo
            .actors
            .iter()
            .any(|a| !killed.contains(&a.id()) && !a.is_killed() && crate::actor::rank(a.active_version()) < crate::actor::rank(target));
        if !behind {
            return;
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn outcomes(s: &Scenario, topo: &Topology, report: &HubReport, killed: &[u64]) -> Vec<ActorOutcome> {
    let placed = s.actors();
    topo.actors
        .iter()
        .map(|a| {
            let p = placed.iter().find(|p| p.id == a.id()).expect("placed");
            let v = a.active_version();
            let dead = killed.contains(&a.id());
            let params_match = (s.verify_params && !dead)
                .then(|| report.digests.get(&v).map(|d| *d == a.params_digest()))
                .flatten();
            ActorOutcome {
                id: a.id(),
                region: p.region.clone(),
                relay: a.is_relay(),
                killed: dead,
                active_version: v,
                results_sent: a.results_sent(),
                params_match,
            }
        })
        .collect()
}

pub fn transfers(events: &[Event]) -> Vec<TransferRow> {
    let mut starts: BTreeMap<(u64, u64), (u64, u64)> = BTreeMap::new();
    let mut rows = Vec::new();
    for e in events {
        match e.kind {
            EventKind::SendStart => {
                starts.entry((e.node, e.version)).or_insert((e.t_us, e.value as u64));
            }
            EventKind::Staged => {
                if let Some((t0, via)) = starts.remove(&(e.node, e.version)) {
                    rows.push(TransferRow {
                        actor: e.node,
                        version: e.version,
                        seconds: e.t_us.saturating_sub(t0) as f64 / 1e6,
                        via,
                    });
                }
            }
            _ => {}
        }
    }
    rows
}

pub fn overlap(events: &[Event]) -> Overlap {
    let mut last_gen_end: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    let mut first_stage: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    for e in events {
        match e.kind {
            EventKind::GenerationEnd => {
                let t = last_gen_end.entry((e.node, e.version)).or_insert(0);
                *t = (*t).max(e.t_us);
            }
            EventKind::StageStart => {
                first_stage.entry((e.node, e.version)).or_insert(e.t_us);
            }
            _ => {}
        }
    }
    let mut o = Overlap::default();
    for (&(node, v), &end) in &last_gen_end {
        if let Some(&stage) = first_stage.get(&(node, v + 1)) {
            o.checked += 1;
            if stage < end {
                o.overlapped += 1;
            }
        }
    }
    o
}

fn write_outputs(run: &RunReport, out: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(out.join("steps.csv"))?;
    let mut header: Vec<String> = [
        "step",
        "version",
        "collection_version",
        "wall_s",
        "collection_s",
        "train_s",
        "payload_bytes",
        "nnz",
        "rho",
        "index_bytes",
        "tokens",
        "accepted",
        "rejected",
        "mean_transfer_s",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(run.links.iter().map(|l| format!("egress_{}", l.name)));
    w.write_record(&header)?;
    for s in &run.hub.steps {
        let ts: Vec<f64> = run.transfers.iter().filter(|t| t.version == s.version).map(|t| t.seconds).collect();
        let mean = if ts.is_empty() { 0.0 } else { ts.iter().sum::<f64>() / ts.len() as f64 };
        let mut rec = vec![
            s.step.to_string(),
            s.version.to_string(),
            s.collection_version.to_string(),
            format!("{:.6}", s.wall_s),
            format!("{:.6}", s.collection_s),
            format!("{:.6}", s.train_s),
            s.payload_bytes.to_string(),
            s.nnz.to_string(),
            format!("{:.6}", s.rho),
            s.index_bytes.to_string(),
            s.tokens.to_string(),
            s.accepted.to_string(),
            s.rejected.to_string(),
            format!("{mean:.6}"),
        ];
        rec.extend(
            run.links
                .iter()
                .map(|l| l.bytes_by_version.get(&s.version).copied().unwrap_or(0).to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("allocations.csv"))?;
    for row in &run.hub.allocations {
        w.serialize(row)?;
    }
    w.flush()?;

    std::fs::write(out.join("summary.json"), serde_json::to_vec_pretty(run)?)?;
    Ok(())
}

pub fn load_report(dir: &Path) -> anyhow::Result<RunReport> {
    let bytes = std::fs::read(dir.join("summary.json")).with_context(|| format!("read {}/summary.json", dir.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Geometric mean of positive values; zero when there are none.
pub fn geometric_mean(values: &[f64]) -> f64 {
    let v: Vec<f64> = values.iter().copied().filter(|x| *x > 0.0).collect();
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t_us: u64, node: u64, kind: EventKind, version: u64) -> Event {
        Event {
            t_us,
            node,
            kind,
            version,
            value: 0.0,
        }
    }

    #[test]
    fn transfer_and_overlap_from_timeline() {
        let events = vec![
            ev(100, 1, EventKind::GenerationEnd, 1),
            ev(150, 1, EventKind::SendStart, 2),
            ev(200, 1, EventKind::StageStart, 2),
            ev(400, 1, EventKind::GenerationEnd, 1),
            ev(1_150, 1, EventKind::Staged, 2),
            ev(2_000, 1, EventKind::GenerationEnd, 2),
            ev(2_500, 1, EventKind::StageStart, 3),
        ];
        let t = transfers(&events);
        assert_eq!(t.len(), 1);
        assert!((t[0].seconds - 0.001).abs() < 1e-12);
        let o = overlap(&events);
        assert_eq!((o.checked, o.overlapped), (2, 1));
    }

    #[test]
    fn geomean() {
        assert!((geometric_mean(&[2.0, 8.0]) - 4.0).abs() < 1e-12);
        assert_eq!(geometric_mean(&[]), 0.0);
    }
}
