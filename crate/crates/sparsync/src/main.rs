use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sparsync::actor::{ActorConfig, ActorHandle};
use sparsync::events::EventLog;
use sparsync::harness::{self, geometric_mean, HarnessError};
use sparsync::link::{Link, LinkShape};
use sparsync::scenario::{Mode, Scenario, ScenarioError};
use sparsync::synth::{transformer_model, UpdateGenerator};
use sparsync_core::codec::{apply_view, layout_from_view};
use sparsync_core::payload::{expected_delta, full_bytes, naive_bytes, PayloadParams};
use sparsync_core::{extract_delta, CheckpointView, DeltaCheckpoint, DeltaMode, ElementType, FusionMap};

/// Sparse-delta weight synchronization: experiment runner and tools.
#[derive(Parser)]
#[command(name = "sparsync", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file in-process and write metrics to a run directory.
    Run(RunArgs),
    /// Offline checkpoint tool.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Analytic payload size for a delta.
    ModelPayload(PayloadArgs),
    /// Summarize one or more run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Run a single role as its own process.
    #[command(subcommand)]
    Node(NodeCommand),
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CodecCommand {
    /// Write a synthetic model snapshot, optionally advanced by some steps.
    Synth {
        #[arg(long)]
        elements: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        steps: u64,
        #[arg(long, default_value_t = 0.01)]
        rho: f64,
        #[arg(long)]
        f32: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Delta between two snapshots of the same layout.
    Encode {
        old: PathBuf,
        new: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Apply a delta to a snapshot and write the resulting snapshot.
    Decode {
        base: PathBuf,
        delta: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print header and per-tensor statistics.
    Inspect { file: PathBuf },
}

#[derive(Args)]
struct PayloadArgs {
    #[arg(long)]
    elements: u64,
    #[arg(long, default_value_t = 0.01)]
    rho: f64,
    #[arg(long, default_value_t = 2)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    tensors: u64,
    #[arg(long, default_value_t = 0.0)]
    cluster_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    mean_run: f64,
}

#[derive(Subcommand)]
enum NodeCommand {
    /// Hub for a scenario; waits for the scenario's actors to connect.
    Hub {
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7400")]
        listen: String,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// One actor or relay.
    Actor {
        #[arg(long)]
        id: u64,
        #[arg(long)]
        region: String,
        #[arg(long)]
        hub: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        /// True generation speed in tokens per second.
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long)]
        relay: bool,
        /// Regional peer as `id=host:port`; relays only.
        #[arg(long = "peer")]
        peers: Vec<String>,
        #[arg(long, default_value_t = 1)]
        streams: usize,
        /// One-way control latency of the region link.
        #[arg(long, default_value_t = 0.0)]
        latency_ms: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPARSYNC_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => return run(a),
        Command::Codec(c) => codec(c),
        Command::ModelPayload(p) => model_payload(p),
        Command::Report { dirs } => report(&dirs),
        Command::Node(n) => return node(n),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, ExitCode> {
    Scenario::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}

fn run(a: RunArgs) -> ExitCode {
    let mut s = match load_scenario(&a.scenario) {
        Ok(s) => s,
        Err(c) => return c,
    };
    if let Some(m) = a.mode {
        s.mode = m;
    }
    if let Some(n) = a.steps {
        s.steps = n;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    match harness::run_scenario(&s, &a.out) {
        Ok(r) => {
            print_report(&a.out, &r);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn print_report(dir: &Path, r: &harness::RunReport) {
    println!("run {}: {} steps, mode {:?}", dir.display(), r.hub.steps.len(), r.scenario.mode);
    println!("step  wall_s  collect_s  payload_B  accepted  rejected");
    for s in &r.hub.steps {
        println!(
            "{:>4}  {:>6.3}  {:>9.3}  {:>9}  {:>8}  {:>8}",
            s.step, s.wall_s, s.collection_s, s.payload_bytes, s.accepted, s.rejected
        );
    }
    println!("total wall {:.3} s, throughput {:.1} tok/s", r.hub.total_wall_s, r.throughput);
    for l in &r.links {
        println!("link {}: {} payload bytes, {} drops", l.name, l.payload_bytes, l.drops);
    }
    println!(
        "invariant violations {}, parameters match {}",
        r.lag_violations,
        r.all_params_match()
    );
}

fn report(dirs: &[PathBuf]) -> anyhow::Result<()> {
    let mut throughputs = Vec::new();
    for d in dirs {
        let r = harness::load_report(d)?;
        print_report(d, &r);
        throughputs.push(r.throughput);
    }
    if dirs.len() > 1 {
        println!("geometric-mean throughput {:.1} tok/s", geometric_mean(&throughputs));
    }
    Ok(())
}

fn model_payload(p: PayloadArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&p.rho) || p.elements == 0 {
        bail!("need elements >= 1 and rho in [0, 1]");
    }
    let params = PayloadParams {
        tensor_count: p.tensors,
        name_bytes: p.tensors * 16,
        cluster_fraction: p.cluster_fraction,
        mean_run: p.mean_run,
        ..PayloadParams::uniform(p.elements, p.rho, p.width)
    };
    let e = expected_delta(&params);
    let full = full_bytes(&params);
    let out = serde_json::json!({
        "nnz": e.nnz,
        "value_bytes": e.value_bytes,
        "index_bytes": e.index_bytes,
        "index_bytes_per_entry": e.index_bytes_per_entry,
        "header_bytes": e.header_bytes,
        "delta_bytes": e.total_bytes,
        "full_bytes": full,
        "delta_over_full": e.total_bytes / full as f64,
        "naive_int32_bytes": naive_bytes(e.nnz),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn read_snapshot(path: &Path) -> anyhow::Result<sparsync_core::ParameterSet> {
    let bytes = std::fs::read(path).with_context(|| format!("read {}", path.display()))?;
    let view = CheckpointView::parse(&bytes)?;
    for t in view.tensors() {
        if !t?.is_dense() {
            bail!("{} is a sparse delta, not a snapshot", path.display());
        }
    }
    let mut p = layout_from_view(&view)?;
    apply_view(&mut p, &view)?;
    Ok(p)
}

fn codec(c: CodecCommand) -> anyhow::Result<()> {
    match c {
        CodecCommand::Synth {
            elements,
            seed,
            steps,
            rho,
            f32,
            out,
        } => {
            let et = if f32 { ElementType::F32 } else { ElementType::Bf16 };
            let mut p = transformer_model(elements, et, seed);
            let mut g = UpdateGenerator::new(seed, rho, 0.3, 8.0);
            for _ in 0..steps {
                g.step(&mut p);
            }
            let fused = FusionMap::transformer(&p)?.fused_layout(&p)?;
            std::fs::write(&out, DeltaCheckpoint::snapshot(&fused, steps)?.to_bytes())?;
            println!("wrote {} ({} elements)", out.display(), elements);
        }
        CodecCommand::Encode { old, new, out } => {
            let (a, b) = (read_snapshot(&old)?, read_snapshot(&new)?);
            let map = FusionMap::identity(&b);
            let d = extract_delta(&a, &b, &map, DeltaMode::Replace, 1, 0)?;
            let bytes = d.to_bytes();
            std::fs::write(&out, &bytes)?;
            println!(
                "wrote {}: {} bytes, nnz {}, index bytes/entry {:.3}",
                out.display(),
                bytes.len(),
                d.nnz(),
                d.index_bytes() as f64 / d.nnz().max(1) as f64
            );
        }
        CodecCommand::Decode { base, delta, out } => {
            let mut p = read_snapshot(&base)?;
            let bytes = std::fs::read(&delta)?;
            let view = CheckpointView::parse(&bytes)?;
            apply_view(&mut p, &view)?;
            std::fs::write(&out, DeltaCheckpoint::snapshot(&p, view.header().version)?.to_bytes())?;
            println!("wrote {} (parameter digest {})", out.display(), p.digest());
        }
        CodecCommand::Inspect { file } => {
            let bytes = std::fs::read(&file)?;
            let view = CheckpointView::parse(&bytes)?;
            let h = view.header();
            let base = if h.is_genesis() { "genesis".to_string() } else { h.base_version.to_string() };
            println!("version {} base {} element {:?} tensors {}", h.version, base, h.element_type, h.tensor_count);
            println!("body {} bytes, hash {}", h.body_len, h.body_hash);
            for t in view.tensors() {
                let t = t?;
                println!(
                    "  {:<32} elements {:>12} nnz {:>12} index {:>10} B values {:>12} B{}",
                    t.name,
                    t.element_count,
                    t.nnz,
                    t.index_stream.len(),
                    t.values.len(),
                    if t.is_dense() { " dense" } else { "" }
                );
            }
        }
    }
    Ok(())
}

fn node(n: NodeCommand) -> ExitCode {
    let result = match n {
        NodeCommand::Hub { scenario, listen, out } => {
            let s = match load_scenario(&scenario) {
                Ok(s) => s,
                Err(c) => return c,
            };
            harness::run_hub_node(&s, &listen, &out).map(|r| {
                println!("hub finished {} steps in {:.3} s", r.steps.len(), r.total_wall_s);
            })
        }
        NodeCommand::Actor {
            id,
            region,
            hub,
            listen,
            tau,
            jitter,
            relay,
            peers,
            streams,
            latency_ms,
            seed,
        } => run_actor(id, region, hub, listen, tau, jitter, relay, &peers, streams, latency_ms, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_actor(
    id: u64,
    region: String,
    hub: SocketAddr,
    listen: String,
    tau: f64,
    jitter: f64,
    relay: bool,
    peers: &[String],
    streams: usize,
    latency_ms: f64,
    seed: u64,
) -> Result<(), HarnessError> {
    let peers = peers
        .iter()
        .map(|p| {
            let (id, addr) = p
                .split_once('=')
                .ok_or_else(|| ScenarioError::Invalid(format!("peer {p:?} is not id=addr")))?;
            let id = id.parse().map_err(|_| ScenarioError::Invalid(format!("bad peer id in {p:?}")))?;
            let addr = addr.parse().map_err(|_| ScenarioError::Invalid(format!("bad peer address in {p:?}")))?;
            Ok((id, addr))
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    let shape = LinkShape {
        latency_ms,
        ..LinkShape::unshaped()
    };
    let cfg = ActorConfig {
        actor_id: id,
        link: Some(Link::new(region.clone(), shape)),
        region,
        is_relay: relay,
        tau_true: tau,
        jitter,
        hub,
        data_listen: listen,
        peers,
        streams,
        seed,
        verify_params: true,
        heartbeat_interval: Duration::from_secs(1),
    };
    let handle = ActorHandle::start(cfg, EventLog::new())?;
    println!("actor {id} data address {}", handle.data_addr());
    handle.wait();
    handle.join();
    Ok(())
}
