//! Job ledger: prompt issuance under time-bounded leases, the result
//! acceptance predicate, and hub-side actor bookkeeping.
//!
//! All time is hub time in microseconds, passed in explicitly.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use crate::hash::Digest;
use crate::scheduler::{self, ActorId, ActorRecord, AllocationOutcome, ScheduleError, SchedulerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Micros(pub u64);

impl Micros {
    pub const ZERO: Micros = Micros(0);

    pub fn from_secs_f64(s: f64) -> Self {
        Micros((s * 1e6) as u64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn plus(self, d: Micros) -> Micros {
        Micros(self.0.saturating_add(d.0))
    }

    pub fn since(self, earlier: Micros) -> Micros {
        Micros(self.0.saturating_sub(earlier.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaseConfig {
    /// Used until the first settlement.
    pub initial: Micros,
    pub min: Micros,
    pub max: Micros,
    /// Multiple of the rolling median completion time.
    pub factor: f64,
    pub window: usize,
}

impl Default for LeaseConfig {
    fn default() -> Self {
        Self {
            initial: Micros(10_000_000),
            min: Micros(5_000_000),
            max: Micros(120_000_000),
            factor: 2.5,
            window: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobState {
    Issued,
    Settled,
    Expired,
    /// Expired and its prompts issued again.
    Reassigned,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub job_id: u64,
    pub prompt_ids: Vec<u64>,
    pub target_version: u64,
    pub expected_hash: Digest,
    pub actor_id: ActorId,
    pub issued_at: Micros,
    pub lease_expiry: Micros,
    pub state: JobState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultReport {
    pub job_id: u64,
    pub actor_id: ActorId,
    pub behavior_version: u64,
    pub reported_hash: Digest,
    /// Hub arrival time.
    pub arrival: Micros,
    pub token_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    LeaseExpired,
    StaleVersion,
    HashMismatch,
    NotIssued,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::LeaseExpired => "lease_expired",
            RejectReason::StaleVersion => "stale_version",
            RejectReason::HashMismatch => "hash_mismatch",
            RejectReason::NotIssued => "not_issued",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

/// `t_r <= expiry && v_r == v_j && h_r == h(v_j) && state == Issued`,
/// reporting the first failing clause in that order.
pub fn acceptance(job: &Job, r: &ResultReport) -> Verdict {
    if r.arrival > job.lease_expiry {
        Verdict::Reject(RejectReason::LeaseExpired)
    } else if r.behavior_version != job.target_version {
        Verdict::Reject(RejectReason::StaleVersion)
    } else if r.reported_hash != job.expected_hash {
        Verdict::Reject(RejectReason::HashMismatch)
    } else if job.state != JobState::Issued {
        Verdict::Reject(RejectReason::NotIssued)
    } else {
        Verdict::Accept
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("unknown job {0}")]
    UnknownJob(u64),
    #[error("actor {0} already registered")]
    DuplicateActor(ActorId),
    #[error("unknown actor {0}")]
    UnknownActor(ActorId),
    #[error("empty allocation")]
    EmptyAllocation,
}

/// Counters for properties that must never be violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InvariantCounters {
    /// Work assigned to an actor more than one version behind.
    pub stale_work_issued: u64,
    /// A prompt settled by more than one accepted result.
    pub duplicate_prompt_settlements: u64,
    /// Accepted result whose behavior version differs from the job target.
    pub wrong_version_accepted: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settlement {
    pub verdict: Verdict,
    pub target_version: u64,
    pub prompt_ids: Vec<u64>,
    /// Prompts returned to the pool by this result (rejection of an issued job).
    pub recycled: usize,
    pub tau_after: Option<f64>,
}

pub struct JobLedger {
    params: SchedulerParams,
    lease: LeaseConfig,
    initial_tau: f64,
    actors: BTreeMap<ActorId, ActorRecord>,
    jobs: BTreeMap<u64, Job>,
    next_job: u64,
    next_prompt: u64,
    recycled: VecDeque<(u64, u64)>,
    completions: VecDeque<u64>,
    last_settle: BTreeMap<ActorId, Micros>,
    settled_prompts: BTreeSet<u64>,
    accepted: BTreeMap<u64, u32>,
    invariants: InvariantCounters,
}

impl JobLedger {
    pub fn new(params: SchedulerParams, lease: LeaseConfig, initial_tau: f64) -> Self {
        Self {
            params,
            lease,
            initial_tau,
            actors: BTreeMap::new(),
            jobs: BTreeMap::new(),
            next_job: 1,
            next_prompt: 0,
            recycled: VecDeque::new(),
            completions: VecDeque::new(),
            last_settle: BTreeMap::new(),
            settled_prompts: BTreeSet::new(),
            accepted: BTreeMap::new(),
            invariants: InvariantCounters::default(),
        }
    }

    pub fn params(&self) -> &SchedulerParams {
        &self.params
    }

    pub fn set_params(&mut self, params: SchedulerParams) {
        self.params = params;
    }

    /// Registers a new actor, or revives a dead one (a restarted actor
    /// starts from no version but keeps its decayed throughput).
    pub fn register_actor(
        &mut self,
        actor_id: ActorId,
        region: impl Into<String>,
        is_relay: bool,
        now: Micros,
    ) -> Result<&ActorRecord, LedgerError> {
        let region = region.into();
        match self.actors.get_mut(&actor_id) {
            Some(a) if a.live => return Err(LedgerError::DuplicateActor(actor_id)),
            Some(a) => {
                let tau = a.tau;
                *a = ActorRecord::new(actor_id, region, is_relay, tau);
                a.last_seen_us = now.0;
            }
            None => {
                let mut a = ActorRecord::new(actor_id, region, is_relay, self.initial_tau);
                a.last_seen_us = now.0;
                self.actors.insert(actor_id, a);
            }
        }
        Ok(&self.actors[&actor_id])
    }

    pub fn actor(&self, id: ActorId) -> Option<&ActorRecord> {
        self.actors.get(&id)
    }

    pub fn actor_mut(&mut self, id: ActorId) -> Option<&mut ActorRecord> {
        self.actors.get_mut(&id)
    }

    pub fn actors(&self) -> impl Iterator<Item = &ActorRecord> {
        self.actors.values()
    }

    pub fn mark_dead(&mut self, id: ActorId) {
        if let Some(a) = self.actors.get_mut(&id) {
            a.live = false;
            a.generating = false;
        }
    }

    pub fn heartbeat(&mut self, id: ActorId, active: u64, generating: bool, staged: &[u64], now: Micros) {
        if let Some(a) = self.actors.get_mut(&id) {
            a.active_version = active;
            a.generating = generating;
            a.staged_versions = staged.iter().copied().collect();
            a.last_seen_us = now.0;
        }
    }

    pub fn mark_staged(&mut self, id: ActorId, version: u64) {
        if let Some(a) = self.actors.get_mut(&id) {
            a.staged_versions.insert(version);
        }
    }

    pub fn commit_acked(&mut self, id: ActorId, version: u64, now: Micros) {
        if let Some(a) = self.actors.get_mut(&id) {
            a.active_version = version;
            a.staged_versions.retain(|&s| s > version);
            a.last_seen_us = now.0;
        }
    }

    /// `factor * median(recent completions)`, clamped.
    pub fn lease_duration(&self) -> Micros {
        if self.completions.is_empty() {
            return Micros(self.lease.initial.0.clamp(self.lease.min.0, self.lease.max.0));
        }
        let mut v: Vec<u64> = self.completions.iter().copied().collect();
        v.sort_unstable();
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
        };
        let d = (median * self.lease.factor) as u64;
        Micros(d.clamp(self.lease.min.0, self.lease.max.0))
    }

    /// Runs the scheduler on the current actor records.
    pub fn allocate(&mut self, version: u64) -> Result<AllocationOutcome, ScheduleError> {
        self.allocate_batch(version, self.params.batch)
    }

    /// Like [`allocate`](Self::allocate) for a batch other than the
    /// configured `B` (topping up recycled prompts).
    pub fn allocate_batch(&mut self, version: u64, batch: u32) -> Result<AllocationOutcome, ScheduleError> {
        let params = SchedulerParams { batch, ..self.params };
        let mut records: Vec<ActorRecord> = self.actors.values().cloned().collect();
        let out = scheduler::allocate(version, &mut records, &params)?;
        for r in records {
            self.actors.insert(r.actor_id, r);
        }
        Ok(out)
    }

    fn take_prompt(&mut self) -> u64 {
        if let Some((prompt, from)) = self.recycled.pop_front() {
            if let Some(j) = self.jobs.get_mut(&from) {
                if j.state == JobState::Expired {
                    j.state = JobState::Reassigned;
                }
            }
            return prompt;
        }
        let p = self.next_prompt;
        self.next_prompt += 1;
        p
    }

    pub fn pool_recycled(&self) -> usize {
        self.recycled.len()
    }

    /// Issues one single-prompt job per allocated request.
    pub fn issue_jobs(
        &mut self,
        version: u64,
        expected_hash: Digest,
        shares: &BTreeMap<ActorId, u32>,
        now: Micros,
    ) -> Result<Vec<Job>, LedgerError> {
        if shares.values().all(|&n| n == 0) {
            return Err(LedgerError::EmptyAllocation);
        }
        let lease = self.lease_duration();
        let mut out = Vec::new();
        for (&actor_id, &n) in shares {
            if n == 0 {
                continue;
            }
            let Some(a) = self.actors.get(&actor_id) else {
                return Err(LedgerError::UnknownActor(actor_id));
            };
            if !(a.active_version == version || a.active_version == version.wrapping_sub(1)) {
                self.invariants.stale_work_issued += 1;
            }
            for _ in 0..n {
                let prompt = self.take_prompt();
                let job = Job {
                    job_id: self.next_job,
                    prompt_ids: alloc::vec![prompt],
                    target_version: version,
                    expected_hash,
                    actor_id,
                    issued_at: now,
                    lease_expiry: now.plus(lease),
                    state: JobState::Issued,
                };
                self.next_job += 1;
                self.jobs.insert(job.job_id, job.clone());
                out.push(job);
            }
        }
        Ok(out)
    }

    pub fn job(&self, id: u64) -> Option<&Job> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.jobs.values()
    }

    fn recycle(&mut self, job_id: u64) -> usize {
        let job = self.jobs.get_mut(&job_id).expect("known job");
        job.state = JobState::Expired;
        let prompts = job.prompt_ids.clone();
        let n = prompts.len();
        for p in prompts {
            self.recycled.push_back((p, job_id));
        }
        n
    }

    /// Applies the acceptance predicate and settles or recycles the job.
    /// The sender's throughput estimate is updated either way.
    pub fn accept_result(&mut self, r: &ResultReport) -> Result<Settlement, LedgerError> {
        let job = self.jobs.get(&r.job_id).ok_or(LedgerError::UnknownJob(r.job_id))?.clone();
        let verdict = acceptance(&job, r);

        let tau_after = if let Some(a) = self.actors.get_mut(&r.actor_id) {
            let since = match self.last_settle.get(&r.actor_id) {
                Some(&t) if t > job.issued_at => t,
                _ => job.issued_at,
            };
            let elapsed = r.arrival.since(since);
            if elapsed.0 > 0 {
                a.tau = scheduler::settle_update(a.tau, r.token_count, elapsed.as_secs_f64(), &self.params);
            }
            self.last_settle.insert(r.actor_id, r.arrival);
            Some(a.tau)
        } else {
            None
        };

        let mut recycled = 0;
        match verdict {
            Verdict::Accept => {
                self.jobs.get_mut(&r.job_id).unwrap().state = JobState::Settled;
                for p in &job.prompt_ids {
                    if !self.settled_prompts.insert(*p) {
                        self.invariants.duplicate_prompt_settlements += 1;
                    }
                }
                if r.behavior_version != job.target_version {
                    self.invariants.wrong_version_accepted += 1;
                }
                *self.accepted.entry(job.target_version).or_default() += 1;
                self.completions.push_back(r.arrival.since(job.issued_at).0);
                while self.completions.len() > self.lease.window {
                    self.completions.pop_front();
                }
            }
            Verdict::Reject(_) if job.state == JobState::Issued => {
                recycled = self.recycle(r.job_id);
            }
            Verdict::Reject(_) => {}
        }
        Ok(Settlement {
            verdict,
            target_version: job.target_version,
            prompt_ids: job.prompt_ids,
            recycled,
            tau_after,
        })
    }

    /// Expires every issued job whose lease ended before `now`; returns the
    /// number of prompts returned to the pool.
    pub fn expire_leases(&mut self, now: Micros) -> usize {
        let due: Vec<u64> = self
            .jobs
            .values()
            .filter(|j| j.state == JobState::Issued && j.lease_expiry < now)
            .map(|j| j.job_id)
            .collect();
        due.into_iter().map(|id| self.recycle(id)).sum()
    }

    /// Withdraws every still-issued job of `version` (its batch is full);
    /// the prompts return to the pool.
    pub fn close_version(&mut self, version: u64) -> Vec<u64> {
        let open: Vec<u64> = self
            .jobs
            .values()
            .filter(|j| j.state == JobState::Issued && j.target_version == version)
            .map(|j| j.job_id)
            .collect();
        for &id in &open {
            self.recycle(id);
        }
        open
    }

    pub fn outstanding(&self, version: u64) -> usize {
        self.jobs
            .values()
            .filter(|j| j.state == JobState::Issued && j.target_version == version)
            .count()
    }

    /// Issued jobs of `version` held by `actor`.
    pub fn outstanding_for(&self, version: u64, actor: ActorId) -> usize {
        self.jobs
            .values()
            .filter(|j| j.state == JobState::Issued && j.target_version == version && j.actor_id == actor)
            .count()
    }

    pub fn accepted_count(&self, version: u64) -> u32 {
        self.accepted.get(&version).copied().unwrap_or(0)
    }

    pub fn invariants(&self) -> InvariantCounters {
        self.invariants
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: Digest = Digest([5; 32]);

    fn ledger() -> JobLedger {
        let mut l = JobLedger::new(SchedulerParams::default(), LeaseConfig::default(), 1000.0);
        for id in 1..=3 {
            l.register_actor(id, "r", id == 1, Micros(0)).unwrap();
            l.commit_acked(id, 0, Micros(0));
        }
        l
    }

    fn shares(pairs: &[(u64, u32)]) -> BTreeMap<u64, u32> {
        pairs.iter().copied().collect()
    }

    fn result(job: &Job, at: u64) -> ResultReport {
        ResultReport {
            job_id: job.job_id,
            actor_id: job.actor_id,
            behavior_version: job.target_version,
            reported_hash: job.expected_hash,
            arrival: Micros(at),
            token_count: 100,
        }
    }

    #[test]
    fn registration() {
        let mut l = ledger();
        assert_eq!(l.actors().count(), 3);
        assert!(l.actor(1).unwrap().is_relay);
        assert_eq!(l.register_actor(2, "r", false, Micros(0)).unwrap_err(), LedgerError::DuplicateActor(2));
        l.mark_dead(2);
        assert!(l.register_actor(2, "r", false, Micros(5)).is_ok());
    }

    #[test]
    fn issue_disjoint_prompts_with_lease() {
        let mut l = ledger();
        let jobs = l.issue_jobs(0, H, &shares(&[(1, 2), (2, 1)]), Micros(100)).unwrap();
        assert_eq!(jobs.len(), 3);
        let prompts: BTreeSet<u64> = jobs.iter().flat_map(|j| j.prompt_ids.clone()).collect();
        assert_eq!(prompts.len(), 3);
        for j in &jobs {
            assert_eq!(j.lease_expiry.0 - j.issued_at.0, l.lease_duration().0);
        }
        assert_eq!(l.issue_jobs(0, H, &shares(&[(1, 0)]), Micros(0)), Err(LedgerError::EmptyAllocation));
    }

    #[test]
    fn predicate_clauses() {
        let mut l = ledger();
        let jobs = l.issue_jobs(0, H, &shares(&[(1, 3)]), Micros(0)).unwrap();
        let ok = result(&jobs[0], 1000);
        assert_eq!(l.accept_result(&ok).unwrap().verdict, Verdict::Accept);
        assert_eq!(
            l.accept_result(&ok).unwrap().verdict,
            Verdict::Reject(RejectReason::NotIssued)
        );

        let mut stale = result(&jobs[1], 1000);
        stale.behavior_version = u64::MAX;
        let s = l.accept_result(&stale).unwrap();
        assert_eq!(s.verdict, Verdict::Reject(RejectReason::StaleVersion));
        assert_eq!(s.recycled, 1);

        let late = result(&jobs[2], jobs[2].lease_expiry.0 + 1000);
        assert_eq!(
            l.accept_result(&late).unwrap().verdict,
            Verdict::Reject(RejectReason::LeaseExpired)
        );
        assert_eq!(l.pool_recycled(), 2);
        assert!(matches!(l.accept_result(&ResultReport { job_id: 99, ..ok }), Err(LedgerError::UnknownJob(99))));
    }

    #[test]
    fn expiry_recycles_and_reassigns() {
        let mut l = ledger();
        let jobs = l.issue_jobs(0, H, &shares(&[(1, 1), (2, 1), (3, 1)]), Micros(0)).unwrap();
        assert_eq!(l.expire_leases(Micros(1)), 0);
        l.accept_result(&result(&jobs[0], 10)).unwrap();
        l.accept_result(&result(&jobs[1], 10)).unwrap();
        let after = jobs[2].lease_expiry.0 + 1;
        assert_eq!(l.expire_leases(Micros(after)), 1);
        assert_eq!(l.job(jobs[2].job_id).unwrap().state, JobState::Expired);
        let again = l.issue_jobs(0, H, &shares(&[(1, 1)]), Micros(after)).unwrap();
        assert_eq!(again[0].prompt_ids, jobs[2].prompt_ids);
        assert_eq!(l.job(jobs[2].job_id).unwrap().state, JobState::Reassigned);
        // the original holder finally reports: rejected, never double-settled
        let v = l.accept_result(&result(&jobs[2], after + 5)).unwrap().verdict;
        assert_eq!(v, Verdict::Reject(RejectReason::LeaseExpired));
        l.accept_result(&result(&again[0], after + 10)).unwrap();
        assert_eq!(l.invariants(), InvariantCounters::default());
        assert_eq!(l.accepted_count(0), 3);
    }

    #[test]
    fn lease_follows_median() {
        let mut l = ledger();
        assert_eq!(l.lease_duration(), Micros(10_000_000));
        let jobs = l.issue_jobs(0, H, &shares(&[(1, 3)]), Micros(0)).unwrap();
        for (j, t) in jobs.iter().zip([4_000_000u64, 8_000_000, 9_000_000]) {
            l.accept_result(&result(j, t)).unwrap();
        }
        assert_eq!(l.lease_duration(), Micros(20_000_000));
    }

    #[test]
    fn tau_updates_use_settle_gaps() {
        let mut l = ledger();
        let jobs = l.issue_jobs(0, H, &shares(&[(2, 2)]), Micros(0)).unwrap();
        // 100 tokens in 0.1 s, then 100 tokens in the next 0.1 s: 1000 tok/s
        let s1 = l.accept_result(&result(&jobs[0], 100_000)).unwrap();
        let s2 = l.accept_result(&result(&jobs[1], 200_000)).unwrap();
        assert_eq!(s1.tau_after, Some(1000.0));
        assert_eq!(s2.tau_after, Some(1000.0));
    }

    #[test]
    fn stale_issue_is_counted() {
        let mut l = ledger();
        l.issue_jobs(2, H, &shares(&[(1, 1)]), Micros(0)).unwrap();
        assert_eq!(l.invariants().stale_work_issued, 1);
    }
}
