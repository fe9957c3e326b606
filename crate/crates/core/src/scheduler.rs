//! Version-gated, throughput-proportional batch allocation.
//!
//! For a collection version `v`, an actor is eligible when it is live and
//! either runs `v` or runs `v - 1` with `v` already staged. Eligible actors
//! split the batch `B` in proportion to their throughput estimate `tau`
//! (floor shares, remainder by largest fractional part, ties to the lower
//! actor id). Every ineligible actor gets nothing and has its `tau`
//! multiplied by `alpha`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

pub type ActorId = u64;

/// Active version of an actor that has not activated genesis yet; chosen so
/// that `NO_VERSION.wrapping_add(1) == 0` lines up with the `v - 1` rule.
pub const NO_VERSION: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerMode {
    /// Shares proportional to `tau`.
    HeterogeneityAware,
    /// Equal shares over eligible actors (baseline).
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerParams {
    pub batch: u32,
    pub alpha: f64,
    pub beta: f64,
    /// Floor applied to every `tau` update.
    pub tau_min: f64,
    pub mode: SchedulerMode,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self {
            batch: 8,
            alpha: 0.5,
            beta: 0.8,
            tau_min: 1.0,
            mode: SchedulerMode::HeterogeneityAware,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("no eligible actor for version {0}")]
    NoEligible(u64),
    #[error("invalid scheduler parameters")]
    BadParams,
}

impl SchedulerParams {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let ok = self.batch >= 1
            && self.alpha > 0.0
            && self.alpha < 1.0
            && self.beta > 0.0
            && self.beta < 1.0
            && self.tau_min > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ScheduleError::BadParams)
        }
    }
}

/// Hub-side view of one actor.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorRecord {
    pub actor_id: ActorId,
    pub region: String,
    pub is_relay: bool,
    pub active_version: u64,
    pub staged_versions: BTreeSet<u64>,
    pub tau: f64,
    pub last_seen_us: u64,
    pub excluded: bool,
    /// Control session up and heartbeats fresh.
    pub live: bool,
    pub generating: bool,
}

impl ActorRecord {
    pub fn new(actor_id: ActorId, region: impl Into<String>, is_relay: bool, tau: f64) -> Self {
        Self {
            actor_id,
            region: region.into(),
            is_relay,
            active_version: NO_VERSION,
            staged_versions: BTreeSet::new(),
            tau,
            last_seen_us: 0,
            excluded: false,
            live: true,
            generating: false,
        }
    }

    pub fn runs(&self, v: u64) -> bool {
        self.active_version == v
    }

    /// Eligibility for collection version `v`.
    pub fn eligible_for(&self, v: u64) -> bool {
        self.live
            && (self.active_version == v
                || (self.active_version == v.wrapping_sub(1) && self.staged_versions.contains(&v)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub version: u64,
    pub shares: BTreeMap<ActorId, u32>,
    pub eligible_total: f64,
}

impl Allocation {
    pub fn share(&self, actor: ActorId) -> u32 {
        self.shares.get(&actor).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.shares.values().map(|&s| s as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationOutcome {
    pub allocation: Allocation,
    /// Eligible actors on `v - 1` that must receive `Commit(v)`.
    pub commit_targets: Vec<ActorId>,
    pub excluded: Vec<ActorId>,
}

/// Splits `batch` over `weights` (all positive) by floor shares plus
/// largest-remainder, ties to the earlier entry (callers pass ascending ids).
pub fn proportional_split(batch: u32, weights: &[(ActorId, f64)]) -> BTreeMap<ActorId, u32> {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut shares = BTreeMap::new();
    let mut fractions = Vec::with_capacity(weights.len());
    let mut assigned = 0u64;
    for &(id, w) in weights {
        let exact = batch as f64 * w / total;
        // exact >= 0, so truncation is the floor
        let floor = (exact as u64).min(batch as u64);
        assigned += floor;
        shares.insert(id, floor as u32);
        fractions.push((id, exact - floor as f64));
    }
    fractions.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut remaining = batch as i64 - assigned as i64;
    let mut i = 0;
    while remaining > 0 && !fractions.is_empty() {
        *shares.get_mut(&fractions[i % fractions.len()].0).unwrap() += 1;
        remaining -= 1;
        i += 1;
    }
    // float rounding can only overshoot by a unit or so; take it back from
    // the smallest fractional parts
    let mut j = fractions.len();
    while remaining < 0 && j > 0 {
        j -= 1;
        let s = shares.get_mut(&fractions[j].0).unwrap();
        if *s > 0 {
            *s -= 1;
            remaining += 1;
        }
    }
    shares
}

/// One scheduling decision for collection version `version`. Mutates `tau`
/// and `excluded` only when an allocation is produced.
pub fn allocate(
    version: u64,
    actors: &mut [ActorRecord],
    params: &SchedulerParams,
) -> Result<AllocationOutcome, ScheduleError> {
    params.validate()?;
    let mut eligible: Vec<&ActorRecord> = actors.iter().filter(|a| a.eligible_for(version)).collect();
    if eligible.is_empty() {
        return Err(ScheduleError::NoEligible(version));
    }
    eligible.sort_by_key(|a| a.actor_id);
    let weights: Vec<(ActorId, f64)> = eligible
        .iter()
        .map(|a| {
            let w = match params.mode {
                SchedulerMode::HeterogeneityAware => a.tau.max(params.tau_min),
                SchedulerMode::Uniform => 1.0,
            };
            (a.actor_id, w)
        })
        .collect();
    let eligible_total = weights.iter().map(|w| w.1).sum();
    let mut shares = proportional_split(params.batch, &weights);
    let commit_targets = eligible
        .iter()
        .filter(|a| a.active_version != version)
        .map(|a| a.actor_id)
        .collect();

    let mut excluded = Vec::new();
    for a in actors.iter_mut() {
        if a.eligible_for(version) {
            a.excluded = false;
        } else {
            a.tau = (a.tau * params.alpha).max(params.tau_min);
            a.excluded = true;
            excluded.push(a.actor_id);
            shares.insert(a.actor_id, 0);
        }
    }
    excluded.sort_unstable();
    Ok(AllocationOutcome {
        allocation: Allocation {
            version,
            shares,
            eligible_total,
        },
        commit_targets,
        excluded,
    })
}

/// `tau <- beta * tau + (1 - beta) * tokens / elapsed`, floored at `tau_min`.
pub fn settle_update(tau: f64, tokens: u64, elapsed_s: f64, params: &SchedulerParams) -> f64 {
    if elapsed_s <= 0.0 {
        return tau;
    }
    let observed = tokens as f64 / elapsed_s;
    (params.beta * tau + (1.0 - params.beta) * observed).max(params.tau_min)
}
