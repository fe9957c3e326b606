//! Scenario files: one TOML document per experiment.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sparsync_core::ledger::{LeaseConfig, Micros};
use sparsync_core::scheduler::{SchedulerMode, SchedulerParams};
use sparsync_core::{DeltaMode, ElementType};

use crate::hub::Broadcast;
use crate::link::LinkShape;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Delta,
    Full,
    DeltaMultistream,
    FullMultistream,
}

impl Mode {
    pub fn broadcast(self) -> Broadcast {
        match self {
            Mode::Delta | Mode::DeltaMultistream => Broadcast::Delta,
            Mode::Full | Mode::FullMultistream => Broadcast::Full,
        }
    }

    pub fn multistream(self) -> bool {
        matches!(self, Mode::DeltaMultistream | Mode::FullMultistream)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "delta" => Mode::Delta,
            "full" => Mode::Full,
            "delta_multistream" => Mode::DeltaMultistream,
            "full_multistream" => Mode::FullMultistream,
            _ => return Err(format!("unknown mode {s:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Bf16,
    F32,
}

impl From<ElementKind> for ElementType {
    fn from(k: ElementKind) -> Self {
        match k {
            ElementKind::Bf16 => ElementType::Bf16,
            ElementKind::F32 => ElementType::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulingKind {
    Uniform,
    HeterogeneityAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    KillActor,
    PartitionRegion,
    KillRelay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    /// True generation speed, tokens per second.
    pub tau_true: f64,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub relay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    #[serde(default = "LinkShape::unshaped")]
    pub link: LinkShape,
    pub actors: Vec<ActorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKind,
    /// Actor id for `kill_actor`, region name otherwise.
    pub target: String,
    /// Fires once this collection has started.
    #[serde(default = "one")]
    pub at_step: u64,
    /// Extra delay after `at_step` starts.
    #[serde(default)]
    pub delay_s: f64,
    /// Partition length.
    #[serde(default = "ten")]
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Timing {
    pub train_time_s: f64,
    pub heartbeat_interval_s: f64,
    pub heartbeat_timeout_s: f64,
    pub allocation_grace_s: f64,
    pub transfer_timeout_s: f64,
    pub commit_timeout_s: f64,
    pub stall_timeout_s: f64,
    pub lease_initial_s: f64,
    pub lease_min_s: f64,
    pub lease_max_s: f64,
    pub lease_factor: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            train_time_s: 4.0,
            heartbeat_interval_s: 1.0,
            heartbeat_timeout_s: 3.0,
            allocation_grace_s: 2.0,
            transfer_timeout_s: 10.0,
            commit_timeout_s: 2.0,
            stall_timeout_s: 120.0,
            lease_initial_s: 10.0,
            lease_min_s: 5.0,
            lease_max_s: 120.0,
            lease_factor: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scheduling {
    pub mode: SchedulingKind,
    pub alpha: f64,
    pub beta: f64,
    pub tau_min: f64,
    /// Throughput estimate a newly registered actor starts with.
    pub initial_tau: f64,
}

impl Default for Scheduling {
    fn default() -> Self {
        let d = SchedulerParams::default();
        Self {
            mode: SchedulingKind::HeterogeneityAware,
            alpha: d.alpha,
            beta: d.beta,
            tau_min: d.tau_min,
            initial_tau: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub steps: u64,
    pub mode: Mode,
    pub model_elements: u64,
    #[serde(default = "bf16")]
    pub element_type: ElementKind,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Share of changed elements that fall in contiguous runs.
    #[serde(default = "default_cluster")]
    pub cluster_fraction: f64,
    #[serde(default = "default_run")]
    pub mean_run: f64,
    /// Prompts per step (B).
    pub batch: u32,
    /// Rollouts per prompt (G).
    #[serde(default = "one")]
    pub group_size: u64,
    pub tokens_per_rollout: u64,
    /// Parallel streams (S) for the multistream modes.
    #[serde(default = "four")]
    pub streams: usize,
    #[serde(default = "default_segment")]
    pub segment_size: usize,
    #[serde(default)]
    pub relay_enabled: bool,
    /// Recompute parameter digests on both sides after every activation.
    #[serde(default = "yes")]
    pub verify_params: bool,
    #[serde(default)]
    pub scheduling: Scheduling,
    #[serde(default)]
    pub timing: Timing,
    pub regions: Vec<RegionSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

fn one() -> u64 {
    1
}
fn four() -> usize {
    4
}
fn ten() -> f64 {
    10.0
}
fn yes() -> bool {
    true
}
fn bf16() -> ElementKind {
    ElementKind::Bf16
}
fn default_rho() -> f64 {
    0.01
}
fn default_cluster() -> f64 {
    0.3
}
fn default_run() -> f64 {
    8.0
}
fn default_segment() -> usize {
    1 << 20
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(0.0))
}

fn micros(s: f64) -> Micros {
    Micros((s * 1e6) as u64)
}

/// Id of an actor, numbered from 1 in file order across regions.
#[derive(Debug, Clone)]
pub struct PlacedActor {
    pub id: u64,
    pub region: String,
    pub spec: ActorSpec,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn actors(&self) -> Vec<PlacedActor> {
        let mut out = Vec::new();
        for r in &self.regions {
            for a in &r.actors {
                out.push(PlacedActor {
                    id: out.len() as u64 + 1,
                    region: r.name.clone(),
                    spec: a.clone(),
                });
            }
        }
        out
    }

    pub fn effective_streams(&self) -> usize {
        if self.mode.multistream() {
            self.streams
        } else {
            1
        }
    }

    pub fn tokens_per_prompt(&self) -> u64 {
        self.group_size * self.tokens_per_rollout
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.model_elements < 1 {
            return bad("model_elements must be at least 1".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho {} outside (0, 1]", self.rho));
        }
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        if self.batch < 1 {
            return bad("batch must be at least 1".into());
        }
        if self.group_size < 1 || self.tokens_per_rollout < 1 {
            return bad("group_size and tokens_per_rollout must be positive".into());
        }
        if self.tokens_per_prompt() > u32::MAX as u64 {
            return bad("group_size * tokens_per_rollout overflows".into());
        }
        if self.streams < 1 || self.streams > 64 {
            return bad(format!("streams {} outside 1..=64", self.streams));
        }
        if self.segment_size < 64 {
            return bad("segment_size below 64 bytes".into());
        }
        if !(0.0..=1.0).contains(&self.cluster_fraction) || self.mean_run < 1.0 {
            return bad("cluster_fraction must be in [0, 1] and mean_run at least 1".into());
        }
        self.scheduler().validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.scheduling.initial_tau <= 0.0 {
            return bad("initial_tau must be positive".into());
        }
        let t = &self.timing;
        for (name, v) in [
            ("train_time_s", t.train_time_s),
            ("heartbeat_interval_s", t.heartbeat_interval_s),
            ("heartbeat_timeout_s", t.heartbeat_timeout_s),
            ("allocation_grace_s", t.allocation_grace_s),
            ("transfer_timeout_s", t.transfer_timeout_s),
            ("commit_timeout_s", t.commit_timeout_s),
            ("stall_timeout_s", t.stall_timeout_s),
            ("lease_initial_s", t.lease_initial_s),
            ("lease_min_s", t.lease_min_s),
            ("lease_max_s", t.lease_max_s),
            ("lease_factor", t.lease_factor),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        if t.heartbeat_interval_s <= 0.0 || t.heartbeat_timeout_s <= t.heartbeat_interval_s {
            return bad("heartbeat_timeout_s must exceed a positive heartbeat_interval_s".into());
        }
        if t.lease_min_s > t.lease_max_s {
            return bad("lease_min_s exceeds lease_max_s".into());
        }
        if self.regions.is_empty() {
            return bad("no regions".into());
        }
        let mut names = BTreeSet::new();
        for r in &self.regions {
            if !names.insert(r.name.as_str()) {
                return bad(format!("duplicate region {:?}", r.name));
            }
            r.link.validate().map_err(|e| ScenarioError::Invalid(format!("region {}: {e}", r.name)))?;
            if r.actors.iter().filter(|a| a.relay).count() > 1 {
                return bad(format!("region {} has more than one relay", r.name));
            }
            for a in &r.actors {
                if a.tau_true.is_nan() || a.tau_true <= 0.0 || !(0.0..1.0).contains(&a.jitter) {
                    return bad(format!("region {}: tau_true must be positive and jitter in [0, 1)", r.name));
                }
            }
        }
        let actors = self.actors();
        if actors.is_empty() {
            return bad("no actors".into());
        }
        for f in &self.faults {
            let ok = match f.kind {
                FaultKind::KillActor => f.target.parse::<u64>().is_ok_and(|id| actors.iter().any(|a| a.id == id)),
                FaultKind::PartitionRegion => names.contains(f.target.as_str()),
                FaultKind::KillRelay => self.regions.iter().any(|r| r.name == f.target && r.actors.iter().any(|a| a.relay)),
            };
            if !ok {
                return bad(format!("fault target {:?} does not exist for {:?}", f.target, f.kind));
            }
            if f.at_step < 1 || f.at_step > self.steps {
                return bad(format!("fault at_step {} outside 1..={}", f.at_step, self.steps));
            }
        }
        Ok(())
    }

    pub fn scheduler(&self) -> SchedulerParams {
        SchedulerParams {
            batch: self.batch,
            alpha: self.scheduling.alpha,
            beta: self.scheduling.beta,
            tau_min: self.scheduling.tau_min,
            mode: match self.scheduling.mode {
                SchedulingKind::Uniform => SchedulerMode::Uniform,
                SchedulingKind::HeterogeneityAware => SchedulerMode::HeterogeneityAware,
            },
        }
    }

    pub fn lease(&self) -> LeaseConfig {
        let t = &self.timing;
        LeaseConfig {
            initial: micros(t.lease_initial_s),
            min: micros(t.lease_min_s),
            max: micros(t.lease_max_s),
            factor: t.lease_factor,
            ..LeaseConfig::default()
        }
    }

    pub fn delta_mode(&self) -> DeltaMode {
        DeltaMode::Replace
    }

    pub fn train_time(&self) -> Duration {
        secs(self.timing.train_time_s)
    }

    pub fn duration(&self, s: f64) -> Duration {
        secs(s)
    }
}
