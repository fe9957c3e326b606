use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsync_core::{
    apply_delta, compute_rho, extract_delta, CheckpointView, DeltaCheckpoint, DeltaMode, ElementType, FusionMap,
    ParameterSet,
};

fn random_set(rng: &mut ChaCha8Rng, names: &[(&str, u64)], et: ElementType) -> ParameterSet {
    let mut p = ParameterSet::new(et);
    for (name, n) in names {
        let mut data = vec![0u8; *n as usize * et.width()];
        rng.fill_bytes(&mut data);
        p.insert(*name, vec![*n], data).unwrap();
    }
    p
}

/// Flips a random mix of isolated elements and short runs, always to a
/// different bit pattern.
fn perturb(rng: &mut ChaCha8Rng, p: &ParameterSet, rho: f64, clustered: bool) -> ParameterSet {
    let mut q = p.clone();
    let width = p.element_type().width();
    for t in q.tensors_mut() {
        let n = t.element_count() as usize;
        let target = ((n as f64) * rho).ceil() as usize;
        let mut done = 0;
        while done < target {
            let start = rng.random_range(0..n);
            let run = if clustered { rng.random_range(1..16) } else { 1 };
            for i in start..(start + run).min(n) {
                let at = i * width;
                t.data[at] ^= rng.random_range(1..=255u8);
                done += 1;
            }
        }
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn extract_then_apply_is_identity(
        seed in any::<u64>(),
        n in 1_000u64..60_000,
        rho_pick in 0usize..3,
        clustered in any::<bool>(),
        f32_lanes in any::<bool>(),
    ) {
        let rho = [0.001, 0.01, 0.03][rho_pick];
        let et = if f32_lanes { ElementType::F32 } else { ElementType::Bf16 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = [("a", n / 3), ("b", n - n / 3)];
        let old = random_set(&mut rng, &names, et);
        let new = perturb(&mut rng, &old, rho, clustered);
        let map = FusionMap::identity(&old);
        let delta = extract_delta(&old, &new, &map, DeltaMode::Replace, 1, 0).unwrap();
        prop_assert_eq!(delta.nnz(), compute_rho(&old, &new).unwrap().total_nonzeros);

        let bytes = delta.to_bytes();
        let parsed = DeltaCheckpoint::from_bytes(&bytes).unwrap();
        let mut applied = old.clone();
        apply_delta(&mut applied, &parsed).unwrap();
        prop_assert!(applied == new);

        let view = CheckpointView::parse(&bytes).unwrap();
        let mut via_view = old.clone();
        sparsync_core::codec::apply_view(&mut via_view, &view).unwrap();
        prop_assert!(via_view == new);
    }
}

fn decoder(layers: usize, hidden: u64) -> Vec<(String, u64)> {
    let mut v = vec![("embed_tokens".to_string(), hidden * 8)];
    for l in 0..layers {
        for (p, k) in [
            ("q_proj", 4),
            ("k_proj", 1),
            ("v_proj", 1),
            ("o_proj", 4),
            ("gate_proj", 11),
            ("up_proj", 11),
            ("down_proj", 11),
        ] {
            v.push((format!("layers.{l}.{p}"), hidden * k));
        }
    }
    v
}

#[test]
fn fused_application_matches_fused_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let shapes = decoder(3, 97);
    let names: Vec<(&str, u64)> = shapes.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    let old = random_set(&mut rng, &names, ElementType::Bf16);
    let new = perturb(&mut rng, &old, 0.02, true);
    let map = FusionMap::transformer(&old).unwrap();
    assert!(map.entries().len() < old.len());

    let delta = extract_delta(&old, &new, &map, DeltaMode::Replace, 1, 0).unwrap();
    let mut actor = map.fused_layout(&old).unwrap();
    apply_delta(&mut actor, &DeltaCheckpoint::from_bytes(&delta.to_bytes()).unwrap()).unwrap();
    let expected = map.fused_layout(&new).unwrap();
    assert!(actor == expected);
    assert_eq!(actor.digest(), map.fused_digest(&new).unwrap());

    // genesis snapshot into an empty actor reproduces the same state
    let snap = DeltaCheckpoint::snapshot(&expected, 0).unwrap().to_bytes();
    let view = CheckpointView::parse(&snap).unwrap();
    let mut fresh = sparsync_core::codec::layout_from_view(&view).unwrap();
    sparsync_core::codec::apply_view(&mut fresh, &view).unwrap();
    assert!(fresh == expected);
}

#[test]
fn chained_versions_stay_bitwise_equal() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut hub = random_set(&mut rng, &[("w", 20_000)], ElementType::Bf16);
    let map = FusionMap::identity(&hub);
    let mut actor = hub.clone();
    for v in 1..=10u64 {
        let next = perturb(&mut rng, &hub, 0.01, v % 2 == 0);
        let d = extract_delta(&hub, &next, &map, DeltaMode::Replace, v, v - 1).unwrap();
        apply_delta(&mut actor, &DeltaCheckpoint::from_bytes(&d.to_bytes()).unwrap()).unwrap();
        hub = next;
        assert!(actor == hub, "diverged at version {v}");
    }
}

#[test]
fn corrupted_body_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let old = random_set(&mut rng, &[("w", 5_000)], ElementType::Bf16);
    let new = perturb(&mut rng, &old, 0.01, false);
    let d = extract_delta(&old, &new, &FusionMap::identity(&old), DeltaMode::Replace, 1, 0).unwrap();
    let bytes = d.to_bytes();
    for pos in [70usize, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(CheckpointView::parse(&bad).is_err(), "flip at {pos} accepted");
    }
}
