//! Versioned replay buffer with bounded-staleness admission.
//!
//! At learner version `v`, only records with `version >= v - S` are
//! admissible; older records are discarded by eviction. Sampling drains the
//! oldest admissible version first, FIFO within a version, which maximizes
//! the staleness actually observed by the learner and keeps the whole
//! pipeline deterministic for replayable simulation.
//!
//! Contract: many producers push concurrently (calls must be serialized or
//! externally linearized), sampling and eviction are issued only by the
//! single learner loop. The deterministic simulator serializes everything
//! through its event loop.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::record::{SchemaViolation, TrajectoryRecord};

#[derive(Debug, Error, PartialEq)]
pub enum BufferError {
    #[error("requested {requested} records but only {available} admissible at learner version {learner_version}")]
    InsufficientAdmissible {
        requested: usize,
        available: usize,
        learner_version: u64,
    },
}

/// Outcome of a push; rejections carry the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PushOutcome {
    Accepted,
    /// Version already below the admissible window at push time.
    RejectedStale,
    /// Failed format-integrity validation; never stored.
    RejectedMalformed(SchemaViolation),
}

impl PushOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, PushOutcome::Accepted)
    }
}

/// Counter snapshot plus a per-version histogram of stored records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BufferStats {
    pub admissible_count: usize,
    pub evicted_total: u64,
    pub rejected_malformed_total: u64,
    pub rejected_stale_total: u64,
    pub per_version_histogram: BTreeMap<u64, usize>,
}

/// Audit row for the optional append-only admission trace.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub event: &'static str,
    pub version: u64,
    pub learner_version: u64,
    pub timestamp_s: f64,
}

/// Version-indexed replay buffer. Capacity is unbounded by default; an
/// optional cap rejects the newest push once reached.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    by_version: BTreeMap<u64, VecDeque<TrajectoryRecord>>,
    stored: usize,
    accepted_total: u64,
    sampled_total: u64,
    evicted_total: u64,
    rejected_malformed_total: u64,
    rejected_stale_total: u64,
    capacity: Option<usize>,
    audit: Option<Vec<AuditRow>>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Buffer with a hard capacity; overflowing pushes are rejected.
    pub fn with_capacity(cap: usize) -> Self {
        Self {
            capacity: Some(cap),
            ..Self::default()
        }
    }

    /// Start recording an append-only audit trace of admission events.
    pub fn enable_audit(&mut self) {
        self.audit = Some(Vec::new());
    }

    pub fn audit_rows(&self) -> &[AuditRow] {
        self.audit.as_deref().unwrap_or(&[])
    }

    fn record_audit(&mut self, event: &'static str, version: u64, learner_version: u64, now_s: f64) {
        if let Some(rows) = self.audit.as_mut() {
            rows.push(AuditRow {
                event,
                version,
                learner_version,
                timestamp_s: now_s,
            });
        }
    }

    pub fn len(&self) -> usize {
        self.stored
    }

    pub fn is_empty(&self) -> bool {
        self.stored == 0
    }

    pub fn accepted_total(&self) -> u64 {
        self.accepted_total
    }

    pub fn sampled_total(&self) -> u64 {
        self.sampled_total
    }

    pub fn evicted_total(&self) -> u64 {
        self.evicted_total
    }

    /// Admission cutoff: versions below `learner_version - S` are stale.
    fn cutoff(learner_version: u64, staleness_budget: u32) -> u64 {
        learner_version.saturating_sub(staleness_budget as u64)
    }

    /// Number of records admissible at the given learner version.
    pub fn admissible_count(&self, learner_version: u64, staleness_budget: u32) -> usize {
        let cutoff = Self::cutoff(learner_version, staleness_budget);
        self.by_version
            .range(cutoff..)
            .map(|(_, q)| q.len())
            .sum()
    }

    /// Validate and admit a record. Records below the staleness window and
    /// records failing schema validation are rejected and counted.
    pub fn push(
        &mut self,
        record: TrajectoryRecord,
        learner_version: u64,
        staleness_budget: u32,
    ) -> PushOutcome {
        self.push_at(record, learner_version, staleness_budget, 0.0)
    }

    /// `push` with an explicit timestamp for the audit trace.
    pub fn push_at(
        &mut self,
        record: TrajectoryRecord,
        learner_version: u64,
        staleness_budget: u32,
        now_s: f64,
    ) -> PushOutcome {
        if let Err(violation) = record.validate() {
            self.rejected_malformed_total += 1;
            self.record_audit("reject_malformed", record.version, learner_version, now_s);
            return PushOutcome::RejectedMalformed(violation);
        }
        if record.version < Self::cutoff(learner_version, staleness_budget) {
            self.rejected_stale_total += 1;
            self.record_audit("reject_stale", record.version, learner_version, now_s);
            return PushOutcome::RejectedStale;
        }
        if let Some(cap) = self.capacity {
            if self.stored >= cap {
                self.rejected_stale_total += 1;
                self.record_audit("reject_overflow", record.version, learner_version, now_s);
                return PushOutcome::RejectedStale;
            }
        }
        let version = record.version;
        self.by_version.entry(version).or_default().push_back(record);
        self.stored += 1;
        self.accepted_total += 1;
        self.record_audit("accept", version, learner_version, now_s);
        PushOutcome::Accepted
    }

    /// Discard every record older than the admissible window. Returns the
    /// number evicted.
    pub fn evict_stale(&mut self, learner_version: u64, staleness_budget: u32) -> usize {
        let cutoff = Self::cutoff(learner_version, staleness_budget);
        let keep = self.by_version.split_off(&cutoff);
        let dropped: usize = self.by_version.values().map(|q| q.len()).sum();
        self.by_version = keep;
        self.stored -= dropped;
        self.evicted_total += dropped as u64;
        if dropped > 0 {
            self.record_audit("evict", cutoff, learner_version, 0.0);
        }
        dropped
    }

    /// True when at least `r` records are stored. Callers running the
    /// learner loop evict before checking, so stored equals admissible.
    pub fn can_form_batch(&self, r: usize) -> bool {
        self.stored >= r
    }

    /// Remove and return exactly `r` admissible records, oldest version
    /// first and FIFO within a version. Admissibility is re-checked against
    /// the current learner version: versions advance between push and
    /// consume, so push-time acceptance is not enough.
    pub fn sample_batch(
        &mut self,
        r: usize,
        learner_version: u64,
        staleness_budget: u32,
    ) -> Result<Vec<TrajectoryRecord>, BufferError> {
        let cutoff = Self::cutoff(learner_version, staleness_budget);
        let available = self.admissible_count(learner_version, staleness_budget);
        if available < r {
            return Err(BufferError::InsufficientAdmissible {
                requested: r,
                available,
                learner_version,
            });
        }
        let mut batch = Vec::with_capacity(r);
        let mut emptied = Vec::new();
        for (&version, queue) in self.by_version.range_mut(cutoff..) {
            while batch.len() < r {
                match queue.pop_front() {
                    Some(rec) => batch.push(rec),
                    None => break,
                }
            }
            if queue.is_empty() {
                emptied.push(version);
            }
            if batch.len() == r {
                break;
            }
        }
        for version in emptied {
            self.by_version.remove(&version);
        }
        self.stored -= batch.len();
        self.sampled_total += batch.len() as u64;
        Ok(batch)
    }

    /// Read-only counter snapshot.
    pub fn stats(&self) -> BufferStats {
        BufferStats {
            admissible_count: self.stored,
            evicted_total: self.evicted_total,
            rejected_malformed_total: self.rejected_malformed_total,
            rejected_stale_total: self.rejected_stale_total,
            per_version_histogram: self
                .by_version
                .iter()
                .map(|(&v, q)| (v, q.len()))
                .collect(),
        }
    }

    /// Smallest stored version, if any.
    pub fn min_version(&self) -> Option<u64> {
        self.by_version.keys().next().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Metadata;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(id: &str, version: u64) -> TrajectoryRecord {
        TrajectoryRecord {
            prompt_id: id.into(),
            response_payload: vec![1, 2],
            reward: 0.0,
            version,
            metadata: Metadata::default(),
        }
    }

    #[test]
    fn admission_boundary() {
        let mut buf = ReplayBuffer::new();
        assert!(buf.push(rec("a", 7), 10, 3).is_accepted()); // v = v_t - S
        assert_eq!(buf.push(rec("b", 6), 10, 3), PushOutcome::RejectedStale);
        let mut bad = rec("c", 9);
        bad.reward = f64::NAN;
        assert!(matches!(
            buf.push(bad, 10, 3),
            PushOutcome::RejectedMalformed(_)
        ));
        let stats = buf.stats();
        assert_eq!(stats.admissible_count, 1);
        assert_eq!(stats.rejected_stale_total, 1);
        assert_eq!(stats.rejected_malformed_total, 1);
    }

    #[test]
    fn eviction_counts() {
        let mut buf = ReplayBuffer::new();
        for i in 0..3 {
            buf.push(rec(&format!("old{i}"), 5), 5, 3);
        }
        for i in 0..2 {
            buf.push(rec(&format!("new{i}"), 8), 8, 3);
        }
        assert_eq!(buf.evict_stale(10, 3), 3); // v=5 < 10-3
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.evict_stale(10, 3), 0);
        let mut empty = ReplayBuffer::new();
        assert_eq!(empty.evict_stale(10, 3), 0);
    }

    #[test]
    fn batch_gate() {
        let mut buf = ReplayBuffer::new();
        for i in 0..127 {
            buf.push(rec(&format!("r{i}"), 1), 1, 3);
        }
        assert!(!buf.can_form_batch(128));
        buf.push(rec("last", 1), 1, 3);
        assert!(buf.can_form_batch(128));
        assert!(!ReplayBuffer::new().can_form_batch(1));
    }

    #[test]
    fn sampling_oldest_version_first_fifo_within() {
        let mut buf = ReplayBuffer::new();
        for i in 0..100 {
            buf.push(rec(&format!("v8-{i}"), 8), 9, 3);
        }
        for i in 0..100 {
            buf.push(rec(&format!("v9-{i}"), 9), 9, 3);
        }
        let batch = buf.sample_batch(128, 9, 3).unwrap();
        assert_eq!(batch.iter().filter(|r| r.version == 8).count(), 100);
        assert_eq!(batch.iter().filter(|r| r.version == 9).count(), 28);
        // v8 records come first and in insertion order
        for (i, r) in batch.iter().take(100).enumerate() {
            assert_eq!(r.prompt_id, format!("v8-{i}"));
        }
        assert_eq!(buf.len(), 72);

        assert!(buf.sample_batch(0, 9, 3).unwrap().is_empty());
        assert!(matches!(
            buf.sample_batch(1000, 9, 3),
            Err(BufferError::InsufficientAdmissible { .. })
        ));
    }

    #[test]
    fn sample_recheck_skips_records_below_window() {
        let mut buf = ReplayBuffer::new();
        buf.push(rec("old", 2), 2, 3);
        buf.push(rec("new", 6), 6, 3);
        // learner moved on; v=2 is no longer admissible at v_t=6, S=3
        assert_eq!(buf.admissible_count(6, 3), 1);
        let batch = buf.sample_batch(1, 6, 3).unwrap();
        assert_eq!(batch[0].prompt_id, "new");
        assert_eq!(buf.len(), 1); // stale record still stored until eviction
    }

    #[test]
    fn stats_counter_trace() {
        let mut buf = ReplayBuffer::new();
        assert_eq!(buf.stats(), BufferStats::default());
        for i in 0..3 {
            buf.push(rec(&format!("r{i}"), 4), 4, 3);
        }
        let mut bad = rec("bad", 4);
        bad.reward = f64::INFINITY;
        buf.push(bad, 4, 3);
        let s = buf.stats();
        assert_eq!(s.admissible_count, 3);
        assert_eq!(s.rejected_malformed_total, 1);
        assert_eq!(s.per_version_histogram.get(&4), Some(&3));
        buf.push(rec("x", 2), 4, 3);
        assert_eq!(buf.evict_stale(7, 3), 1); // only v=2 falls below 7-3
        assert_eq!(buf.stats().evicted_total, 1);
        assert_eq!(buf.evict_stale(8, 3), 3);
        assert_eq!(buf.stats().evicted_total, 4);
    }

    #[test]
    fn conservation_under_random_workload() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut buf = ReplayBuffer::new();
        let mut learner_version = 0u64;
        let s_budget = 3;
        let mut sampled = 0u64;
        for step in 0..2000 {
            let version = learner_version.saturating_sub(rng.gen_range(0..6));
            buf.push(rec(&format!("p{step}"), version), learner_version, s_budget);
            if rng.gen_bool(0.3) {
                learner_version += 1;
                buf.evict_stale(learner_version, s_budget);
            }
            if rng.gen_bool(0.2) {
                let take = rng.gen_range(0..4).min(buf.admissible_count(learner_version, s_budget));
                if take > 0 {
                    let batch = buf.sample_batch(take, learner_version, s_budget).unwrap();
                    for r in &batch {
                        assert!(learner_version - r.version <= s_budget as u64);
                    }
                    sampled += batch.len() as u64;
                }
            }
        }
        assert_eq!(
            buf.accepted_total(),
            sampled + buf.evicted_total() + buf.len() as u64
        );
        assert_eq!(buf.sampled_total(), sampled);
    }

    #[test]
    fn deterministic_replay() {
        let run = || {
            let mut buf = ReplayBuffer::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut out = Vec::new();
            for i in 0..500 {
                let v = rng.gen_range(0..8u64);
                buf.push(rec(&format!("p{i}"), v), 8, 6);
                if i % 7 == 0 && buf.can_form_batch(3) {
                    out.extend(
                        buf.sample_batch(3, 8, 6)
                            .unwrap()
                            .into_iter()
                            .map(|r| r.prompt_id),
                    );
                }
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn capacity_cap_rejects_newest() {
        let mut buf = ReplayBuffer::with_capacity(2);
        assert!(buf.push(rec("a", 1), 1, 3).is_accepted());
        assert!(buf.push(rec("b", 1), 1, 3).is_accepted());
        assert_eq!(buf.push(rec("c", 1), 1, 3), PushOutcome::RejectedStale);
        assert_eq!(buf.len(), 2);
    }

    #[test]
    fn audit_trace_records_admissions() {
        let mut buf = ReplayBuffer::new();
        buf.enable_audit();
        buf.push_at(rec("a", 5), 5, 3, 1.0);
        buf.push_at(rec("b", 1), 5, 3, 2.0);
        let rows = buf.audit_rows();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].event, "accept");
        assert_eq!(rows[1].event, "reject_stale");
        assert_eq!(rows[1].timestamp_s, 2.0);
    }
}
