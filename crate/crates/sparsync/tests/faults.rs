use sparsync::harness::{run_scenario, RunReport};
use sparsync::scenario::Scenario;

fn run(text: &str) -> RunReport {
    let s = Scenario::parse(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_scenario(&s, dir.path()).unwrap()
}

fn assert_clean(r: &RunReport) {
    assert_eq!(r.hub.steps.len() as u64, r.scenario.steps);
    assert_eq!(r.hub.invariants.violations(), 0, "{:?}", r.hub.invariants);
    for s in &r.hub.steps {
        assert_eq!(s.accepted, r.scenario.batch, "step {}", s.step);
    }
}

#[test]
fn killed_actor_work_is_recycled() {
    let r = run(r#"
seed = 3
steps = 4
mode = "delta"
model_elements = 200000
batch = 12
tokens_per_rollout = 400
segment_size = 16384
[timing]
train_time_s = 0.5
lease_initial_s = 2.0
lease_min_s = 1.0
heartbeat_interval_s = 0.2
heartbeat_timeout_s = 0.8
[[regions]]
name = "east"
actors = [{ tau_true = 2000.0 }, { tau_true = 2000.0 }, { tau_true = 2000.0 }]
[[faults]]
kind = "kill_actor"
target = "2"
at_step = 2
delay_s = 0.1
"#);
    assert_clean(&r);
    assert_eq!(r.faults_applied.len(), 1);
    assert!(r.hub.expired_prompts > 0);
    assert!(r.actors.iter().find(|a| a.id == 2).unwrap().killed);
    // no work for the dead actor after its lease ran out
    let last = r.hub.allocations.iter().filter(|a| a.step == 4 && a.actor == 2);
    assert!(last.into_iter().all(|a| a.share == 0));
}

#[test]
fn peers_fall_back_to_direct_sends_when_the_relay_dies() {
    let r = run(r#"
seed = 3
steps = 4
mode = "delta"
model_elements = 2000000
rho = 0.05
batch = 8
tokens_per_rollout = 200
segment_size = 65536
relay_enabled = true
[timing]
train_time_s = 0.5
[[regions]]
name = "west"
link = { rate_bps = 1e9, latency_ms = 5.0 }
actors = [{ tau_true = 2000.0, relay = true }, { tau_true = 2000.0 }, { tau_true = 2000.0 }, { tau_true = 2000.0 }]
[[faults]]
kind = "kill_relay"
target = "west"
at_step = 3
"#);
    assert_clean(&r);
    let link = r.link("west").unwrap();
    let v1 = link.bytes_by_version[&1] as f64 / r.hub.artifact_bytes[&1] as f64;
    assert!((1.0..1.01).contains(&v1), "relayed v1 egress ratio {v1}");
    let last = r.hub.steps.last().unwrap().version - 1;
    let direct = link.bytes_by_version[&last] as f64 / r.hub.artifact_bytes[&last] as f64;
    assert!((3.0..3.03).contains(&direct), "direct egress ratio {direct}");
    assert!(r.actors.iter().filter(|a| !a.killed).all(|a| a.params_match == Some(true)));
}

#[test]
fn partitioned_region_catches_up() {
    let r = run(r#"
seed = 5
steps = 5
mode = "delta_multistream"
model_elements = 200000
batch = 8
tokens_per_rollout = 200
segment_size = 16384
[timing]
train_time_s = 0.3
heartbeat_interval_s = 0.2
heartbeat_timeout_s = 0.8
lease_initial_s = 2.0
lease_min_s = 1.0
allocation_grace_s = 0.5
[[regions]]
name = "east"
actors = [{ tau_true = 2000.0 }]
[[regions]]
name = "west"
link = { rate_bps = 1e9, latency_ms = 10.0, loss = 0.01 }
actors = [{ tau_true = 2000.0 }]
[[faults]]
kind = "partition_region"
target = "west"
at_step = 2
duration_s = 2.0
"#);
    assert_clean(&r);
    assert!(r.all_params_match());
}

#[test]
fn full_multistream_run_over_lossy_link() {
    let r = run(r#"
seed = 5
steps = 3
mode = "full_multistream"
model_elements = 2000000
batch = 8
tokens_per_rollout = 200
[timing]
train_time_s = 0.3
[[regions]]
name = "east"
link = { rate_bps = 1e9, latency_ms = 2.0, loss = 0.005 }
actors = [{ tau_true = 2000.0 }, { tau_true = 1000.0 }]
"#);
    assert_clean(&r);
    assert!(r.all_params_match());
    let full = r.hub.artifact_bytes[&1];
    assert!(full >= 4_000_000, "full snapshot {full} B");
}
