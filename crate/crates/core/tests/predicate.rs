use sparsync_core::hash::Digest;
use sparsync_core::ledger::{acceptance, Job, JobState, Micros, RejectReason, ResultReport, Verdict};

fn job() -> Job {
    Job {
        job_id: 1,
        prompt_ids: vec![10],
        target_version: 4,
        expected_hash: Digest([7; 32]),
        actor_id: 2,
        issued_at: Micros(0),
        lease_expiry: Micros(1_000),
        state: JobState::Issued,
    }
}

#[test]
fn only_all_true_accepts() {
    let j = job();
    for lease_ok in [false, true] {
        for version_ok in [false, true] {
            for hash_ok in [false, true] {
                let r = ResultReport {
                    job_id: 1,
                    actor_id: 2,
                    behavior_version: if version_ok { 4 } else { 3 },
                    reported_hash: if hash_ok { Digest([7; 32]) } else { Digest([8; 32]) },
                    arrival: Micros(if lease_ok { 1_000 } else { 1_001 }),
                    token_count: 5,
                };
                let v = acceptance(&j, &r);
                let expect_accept = lease_ok && version_ok && hash_ok;
                assert_eq!(v == Verdict::Accept, expect_accept, "{lease_ok} {version_ok} {hash_ok}");
                if !lease_ok {
                    assert_eq!(v, Verdict::Reject(RejectReason::LeaseExpired));
                }
            }
        }
    }
}
