use sparsync::harness::run_scenario;
use sparsync::scenario::Scenario;

const BASE: &str = r#"
seed = 11
steps = 3
mode = "delta"
model_elements = 200000
batch = 8
tokens_per_rollout = 50
segment_size = 16384
[timing]
train_time_s = 0.3
allocation_grace_s = 1.0
[[regions]]
name = "east"
actors = [{ tau_true = 2000.0 }, { tau_true = 2000.0 }]
"#;

#[test]
fn small_delta_run_completes() {
    let s = Scenario::parse(BASE).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = run_scenario(&s, dir.path()).unwrap();
    assert_eq!(r.hub.steps.len(), 3);
    for st in &r.hub.steps {
        assert_eq!(st.accepted, 8);
    }
    assert_eq!(r.lag_violations, 0);
    assert!(r.all_params_match());
    assert!(dir.path().join("steps.csv").exists());
}

#[test]
fn delta_and_full_modes_reach_the_same_parameters() {
    let mut digests = Vec::new();
    for mode in ["delta", "full", "delta_multistream"] {
        let s = Scenario::parse(&BASE.replace("mode = \"delta\"", &format!("mode = \"{mode}\""))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = run_scenario(&s, dir.path()).unwrap();
        assert!(r.all_params_match(), "{mode}");
        digests.push(r.hub.digests);
    }
    assert_eq!(digests[0], digests[1]);
    assert_eq!(digests[0], digests[2]);
}

#[test]
fn payload_columns_are_seed_deterministic() {
    let run = || {
        let s = Scenario::parse(BASE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = run_scenario(&s, dir.path()).unwrap();
        r.hub.steps.iter().map(|s| (s.payload_bytes, s.nnz, s.index_bytes)).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn bundled_scenarios_validate() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 3);
}
