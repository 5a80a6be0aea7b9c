//! Policy-snapshot dissemination strategies.
//!
//! Three strategies are modeled:
//!
//! * `StarUnlimited` — push-to-all with no learner uplink cap; every worker
//!   receives the snapshot at its own link rate. The idealized baseline.
//! * `StarLimited` — push-to-all with a finite learner uplink `B_0` split
//!   fairly across active workers; each flow runs at `min(B_0/|A|, B_w)`.
//! * `TreePipelined` — the snapshot is split into `N = min(floor(B_0/B_w),
//!   fleet)` disjoint stripes; each stripe streams down a relay chain with
//!   fan-out 1 and chunk-level store-and-forward, so dissemination runs at
//!   line rate after a one-chunk-per-hop warm-up.
//!
//! Install latency at chain depth `d` under the pipeline model:
//!
//! ```text
//! t(d) = stripe_bytes/B_w + (d-1) * chunk_bytes/B_w + d * latency
//! ```
//!
//! The learner-visible broadcast time `T_bcast` is the completion time of a
//! target fraction `q` of the fleet (the `ceil(q*|A|)`-th smallest install).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::ceil_rel;
use crate::scheduler::WorkerSpec;

#[derive(Debug, Error, PartialEq)]
pub enum BroadcastError {
    #[error("cannot plan a broadcast over zero workers")]
    NoWorkers,
    #[error("tree-pipelined dissemination requires a finite learner uplink")]
    UnlimitedUplinkForTree,
    #[error("invalid network config: {0}")]
    InvalidNetwork(String),
    #[error("chunk for stripe {stripe} delivered to worker {worker} which is not assigned to it")]
    UnassignedStripe { worker: String, stripe: usize },
}

/// An immutable versioned parameter blob of known size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub version: u64,
    pub size_bytes: u64,
    pub payload_digest: u64,
}

impl PolicySnapshot {
    /// Snapshot with a digest derived from version and size. The digest is
    /// an opaque integrity tag, not a cryptographic hash.
    pub fn new(version: u64, size_bytes: u64) -> Self {
        // FNV-1a over the two fields; stable across platforms.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in version.to_le_bytes().iter().chain(size_bytes.to_le_bytes().iter()) {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        Self {
            version,
            size_bytes,
            payload_digest: h,
        }
    }
}

/// Link model: rates in bytes/second, `None` uplink means unlimited.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub learner_uplink_bytes_per_s: Option<f64>,
    pub worker_link_bytes_per_s: f64,
    pub chunk_bytes: u64,
    pub latency_per_hop_s: f64,
}

impl NetworkConfig {
    pub const DEFAULT_CHUNK_BYTES: u64 = 4 * 1024 * 1024;

    pub fn validate(&self) -> Result<(), BroadcastError> {
        if let Some(b0) = self.learner_uplink_bytes_per_s {
            if !(b0 > 0.0) {
                return Err(BroadcastError::InvalidNetwork(
                    "learner uplink must be positive".into(),
                ));
            }
        }
        if !(self.worker_link_bytes_per_s > 0.0) {
            return Err(BroadcastError::InvalidNetwork(
                "worker link rate must be positive".into(),
            ));
        }
        if self.chunk_bytes == 0 {
            return Err(BroadcastError::InvalidNetwork("chunk_bytes must be > 0".into()));
        }
        if self.latency_per_hop_s < 0.0 {
            return Err(BroadcastError::InvalidNetwork("latency must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroadcastStrategy {
    StarUnlimited,
    StarLimited,
    TreePipelined,
}

/// One stripe of the snapshot and the relay chain that carries it.
/// Star plans degenerate to one full-snapshot "stripe" per worker with a
/// single-hop chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripeChain {
    pub stripe_index: usize,
    pub offset: u64,
    pub len: u64,
    /// Worker ids from first hop (fed by the learner) to the leaf.
    pub chain: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BroadcastPlan {
    pub strategy: BroadcastStrategy,
    pub snapshot_bytes: u64,
    /// Nominal stripe size (the largest stripe).
    pub stripe_bytes: u64,
    pub stripes: Vec<StripeChain>,
}

impl BroadcastPlan {
    pub fn fleet_size(&self) -> usize {
        match self.strategy {
            BroadcastStrategy::TreePipelined => self.stripes.iter().map(|s| s.chain.len()).sum(),
            _ => self.stripes.len(),
        }
    }

    pub fn max_depth(&self) -> usize {
        self.stripes.iter().map(|s| s.chain.len()).max().unwrap_or(0)
    }
}

/// Per-worker install times plus the fraction-q completion time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BroadcastOutcome {
    pub per_worker_install_time_s: BTreeMap<String, f64>,
    pub t_bcast_s: f64,
    pub bytes_sent_by_learner: u64,
}

/// Build a dissemination plan over the active workers.
///
/// Tree chains are balanced (depth difference at most one) and assignment
/// is deterministic: workers ordered by descending link headroom, then id,
/// dealt round-robin across chains so the fastest links sit closest to the
/// learner.
pub fn plan_broadcast(
    strategy: BroadcastStrategy,
    workers: &[WorkerSpec],
    net: &NetworkConfig,
    snapshot: &PolicySnapshot,
) -> Result<BroadcastPlan, BroadcastError> {
    if workers.is_empty() {
        return Err(BroadcastError::NoWorkers);
    }
    net.validate()?;
    let g = snapshot.size_bytes;
    match strategy {
        BroadcastStrategy::StarUnlimited | BroadcastStrategy::StarLimited => {
            let stripes = workers
                .iter()
                .enumerate()
                .map(|(i, w)| StripeChain {
                    stripe_index: i,
                    offset: 0,
                    len: g,
                    chain: vec![w.id.clone()],
                })
                .collect();
            Ok(BroadcastPlan {
                strategy,
                snapshot_bytes: g,
                stripe_bytes: g,
                stripes,
            })
        }
        BroadcastStrategy::TreePipelined => {
            let b0 = net
                .learner_uplink_bytes_per_s
                .ok_or(BroadcastError::UnlimitedUplinkForTree)?;
            let parallel = (b0 / net.worker_link_bytes_per_s).floor() as usize;
            let n = parallel.min(workers.len()).max(1);

            let mut ordered: Vec<&WorkerSpec> = workers.iter().collect();
            ordered.sort_by(|a, b| {
                b.link_bytes_per_s
                    .total_cmp(&a.link_bytes_per_s)
                    .then_with(|| a.id.cmp(&b.id))
            });

            let mut chains: Vec<Vec<String>> = vec![Vec::new(); n];
            for (k, w) in ordered.iter().enumerate() {
                chains[k % n].push(w.id.clone());
            }

            // Split [0, G) into n disjoint stripes, sizes differing by at
            // most one byte.
            let base = g / n as u64;
            let extra = (g % n as u64) as usize;
            let mut offset = 0u64;
            let mut stripes = Vec::with_capacity(n);
            for (j, chain) in chains.into_iter().enumerate() {
                let len = base + if j < extra { 1 } else { 0 };
                stripes.push(StripeChain {
                    stripe_index: j,
                    offset,
                    len,
                    chain,
                });
                offset += len;
            }
            let stripe_bytes = stripes.iter().map(|s| s.len).max().unwrap_or(0);
            Ok(BroadcastPlan {
                strategy,
                snapshot_bytes: g,
                stripe_bytes,
                stripes,
            })
        }
    }
}

/// Closed-form install times for a plan.
///
/// A worker installs when the bytes routed through it have fully arrived:
/// the full snapshot for star plans, its assigned stripe for tree plans.
pub fn simulate_dissemination(
    plan: &BroadcastPlan,
    net: &NetworkConfig,
    snapshot: &PolicySnapshot,
    q: f64,
) -> BroadcastOutcome {
    debug_assert!(q > 0.0 && q <= 1.0);
    let g = snapshot.size_bytes as f64;
    let bw = net.worker_link_bytes_per_s;
    let lat = net.latency_per_hop_s;
    let mut install = BTreeMap::new();
    let bytes_sent;

    match plan.strategy {
        BroadcastStrategy::StarUnlimited => {
            for s in &plan.stripes {
                install.insert(s.chain[0].clone(), g / bw + lat);
            }
            bytes_sent = plan.snapshot_bytes * plan.stripes.len() as u64;
        }
        BroadcastStrategy::StarLimited => {
            let b0 = net
                .learner_uplink_bytes_per_s
                .expect("star-limited requires a finite uplink");
            let fleet = plan.stripes.len() as f64;
            let rate = (b0 / fleet).min(bw);
            for s in &plan.stripes {
                install.insert(s.chain[0].clone(), g / rate + lat);
            }
            bytes_sent = plan.snapshot_bytes * plan.stripes.len() as u64;
        }
        BroadcastStrategy::TreePipelined => {
            let chunk = net.chunk_bytes as f64;
            for s in &plan.stripes {
                let stripe_t = s.len as f64 / bw;
                for (idx, worker) in s.chain.iter().enumerate() {
                    let depth = (idx + 1) as f64;
                    let t = stripe_t + (depth - 1.0) * chunk / bw + depth * lat;
                    install.insert(worker.clone(), t);
                }
            }
            bytes_sent = plan.snapshot_bytes;
        }
    }

    let times: Vec<f64> = install.values().copied().collect();
    let t_bcast_s = measure_t_bcast(&times, q, times.len());
    BroadcastOutcome {
        per_worker_install_time_s: install,
        t_bcast_s,
        bytes_sent_by_learner: bytes_sent,
    }
}

/// The `ceil(q * fleet_size)`-th smallest install time. Returns infinity
/// when fewer workers installed than the target count.
pub fn measure_t_bcast(install_times: &[f64], q: f64, fleet_size: usize) -> f64 {
    debug_assert!(fleet_size >= 1);
    let k = ceil_rel(q * fleet_size as f64) as usize;
    let k = k.max(1);
    if install_times.len() < k {
        return f64::INFINITY;
    }
    let mut sorted = install_times.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted[k - 1]
}

/// Chunk identity within a dissemination round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub snapshot_version: u64,
    pub stripe_index: usize,
    pub chunk_index: usize,
    pub len_bytes: u64,
}

/// Relay actions a worker takes on chunk receipt.
#[derive(Debug, Clone, PartialEq)]
pub enum RelayAction {
    /// Queue the chunk to the unique child in the same event-time step.
    Forward { to: String, chunk: Chunk },
    /// All assigned bytes assembled; switch the local version and start
    /// generating under it immediately.
    InstallComplete { version: u64 },
}

/// Per-worker store-and-forward assembly state for one snapshot version.
#[derive(Debug, Clone)]
pub struct RelayState {
    worker_id: String,
    version: u64,
    stripe_index: usize,
    chunks_expected: usize,
    received: Vec<bool>,
    received_count: usize,
    child: Option<String>,
    installed: bool,
}

impl RelayState {
    pub fn new(
        worker_id: &str,
        version: u64,
        stripe_index: usize,
        chunks_expected: usize,
        child: Option<String>,
    ) -> Self {
        Self {
            worker_id: worker_id.to_string(),
            version,
            stripe_index,
            chunks_expected,
            received: vec![false; chunks_expected],
            received_count: 0,
            child,
            installed: false,
        }
    }

    /// Number of chunks a stripe of `len` bytes splits into.
    pub fn chunk_count(len: u64, chunk_bytes: u64) -> usize {
        if len == 0 {
            0
        } else {
            ((len + chunk_bytes - 1) / chunk_bytes) as usize
        }
    }

    pub fn is_installed(&self) -> bool {
        self.installed
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Handle one received chunk: append to local assembly and relay to the
    /// child. Duplicate chunks are idempotent no-ops; chunks for a stripe
    /// this worker is not part of signal a mis-planned topology.
    pub fn forward_on_receipt(&mut self, chunk: Chunk) -> Result<Vec<RelayAction>, BroadcastError> {
        if chunk.stripe_index != self.stripe_index || chunk.snapshot_version != self.version {
            return Err(BroadcastError::UnassignedStripe {
                worker: self.worker_id.clone(),
                stripe: chunk.stripe_index,
            });
        }
        if chunk.chunk_index >= self.chunks_expected || self.received[chunk.chunk_index] {
            return Ok(Vec::new());
        }
        self.received[chunk.chunk_index] = true;
        self.received_count += 1;
        let mut actions = Vec::new();
        if let Some(child) = &self.child {
            actions.push(RelayAction::Forward {
                to: child.clone(),
                chunk,
            });
        }
        if self.received_count == self.chunks_expected && !self.installed {
            self.installed = true;
            actions.push(RelayAction::InstallComplete {
                version: self.version,
            });
        }
        Ok(actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: u64 = 1_000_000;

    fn worker(id: &str, link: f64) -> WorkerSpec {
        WorkerSpec {
            id: id.into(),
            mu_rollouts_per_s: 1.0,
            cost_per_hour: 1.0,
            link_bytes_per_s: link,
        }
    }

    fn net(b0: Option<f64>, bw: f64) -> NetworkConfig {
        NetworkConfig {
            learner_uplink_bytes_per_s: b0,
            worker_link_bytes_per_s: bw,
            chunk_bytes: MB,
            latency_per_hop_s: 0.0,
        }
    }

    fn fleet(n: usize) -> Vec<WorkerSpec> {
        (0..n).map(|i| worker(&format!("w{i:02}"), 10.0 * MB as f64)).collect()
    }

    #[test]
    fn tree_plan_shapes() {
        let snap = PolicySnapshot::new(1, 100 * MB);
        let nw = net(Some(40.0 * MB as f64), 10.0 * MB as f64);
        let plan =
            plan_broadcast(BroadcastStrategy::TreePipelined, &fleet(8), &nw, &snap).unwrap();
        assert_eq!(plan.stripes.len(), 4); // floor(B0/Bw) = 4
        for s in &plan.stripes {
            assert_eq!(s.chain.len(), 2);
        }

        let plan3 =
            plan_broadcast(BroadcastStrategy::TreePipelined, &fleet(3), &net(Some(80.0 * MB as f64), 10.0 * MB as f64), &snap)
                .unwrap();
        assert_eq!(plan3.stripes.len(), 3); // capped by fleet size
        assert!(plan3.stripes.iter().all(|s| s.chain.len() == 1));
    }

    #[test]
    fn star_plan_is_single_level() {
        let snap = PolicySnapshot::new(1, 100 * MB);
        let plan = plan_broadcast(
            BroadcastStrategy::StarLimited,
            &fleet(5),
            &net(Some(40.0 * MB as f64), 10.0 * MB as f64),
            &snap,
        )
        .unwrap();
        assert_eq!(plan.stripes.len(), 5);
        assert!(plan.stripes.iter().all(|s| s.chain.len() == 1 && s.len == 100 * MB));
    }

    #[test]
    fn plan_errors() {
        let snap = PolicySnapshot::new(1, MB);
        let nw = net(Some(40.0 * MB as f64), 10.0 * MB as f64);
        assert_eq!(
            plan_broadcast(BroadcastStrategy::StarUnlimited, &[], &nw, &snap),
            Err(BroadcastError::NoWorkers)
        );
        assert_eq!(
            plan_broadcast(
                BroadcastStrategy::TreePipelined,
                &fleet(4),
                &net(None, 10.0 * MB as f64),
                &snap
            ),
            Err(BroadcastError::UnlimitedUplinkForTree)
        );
    }

    #[test]
    fn stripes_are_disjoint_and_cover_snapshot() {
        let snap = PolicySnapshot::new(2, 100 * MB + 3); // uneven split
        let nw = net(Some(40.0 * MB as f64), 10.0 * MB as f64);
        let plan =
            plan_broadcast(BroadcastStrategy::TreePipelined, &fleet(9), &nw, &snap).unwrap();
        let mut covered = 0u64;
        let mut next_offset = 0u64;
        for s in &plan.stripes {
            assert_eq!(s.offset, next_offset);
            next_offset += s.len;
            covered += s.len;
        }
        assert_eq!(covered, snap.size_bytes);
        // every worker appears exactly once across all chains
        let mut seen: Vec<&String> = plan.stripes.iter().flat_map(|s| &s.chain).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        // balanced depth
        let depths: Vec<usize> = plan.stripes.iter().map(|s| s.chain.len()).collect();
        assert!(depths.iter().max().unwrap() - depths.iter().min().unwrap() <= 1);
    }

    #[test]
    fn star_limited_fair_share() {
        // G=100 MB, B0=40 MB/s, 8 workers -> per-flow 5 MB/s -> 20 s
        let snap = PolicySnapshot::new(1, 100 * MB);
        let nw = net(Some(40.0 * MB as f64), 10.0 * MB as f64);
        let plan = plan_broadcast(BroadcastStrategy::StarLimited, &fleet(8), &nw, &snap).unwrap();
        let out = simulate_dissemination(&plan, &nw, &snap, 0.9);
        for (_, t) in &out.per_worker_install_time_s {
            assert!((t - 20.0).abs() < 1e-12);
        }
        assert!((out.t_bcast_s - 20.0).abs() < 1e-12);
        assert_eq!(out.bytes_sent_by_learner, 800 * MB);
    }

    #[test]
    fn star_unlimited_link_bound() {
        let snap = PolicySnapshot::new(1, 100 * MB);
        let nw = net(None, 10.0 * MB as f64);
        let plan = plan_broadcast(BroadcastStrategy::StarUnlimited, &fleet(8), &nw, &snap).unwrap();
        let out = simulate_dissemination(&plan, &nw, &snap, 0.9);
        assert!((out.t_bcast_s - 10.0).abs() < 1e-12);
    }

    #[test]
    fn tree_pipeline_closed_form() {
        // 4 stripes of 25 MB, chunk 1 MB, depth 2: installs at 2.5 s and 2.6 s
        let snap = PolicySnapshot::new(1, 100 * MB);
        let nw = net(Some(40.0 * MB as f64), 10.0 * MB as f64);
        let plan =
            plan_broadcast(BroadcastStrategy::TreePipelined, &fleet(8), &nw, &snap).unwrap();
        assert_eq!(plan.stripe_bytes, 25 * MB);
        let out = simulate_dissemination(&plan, &nw, &snap, 0.9);
        let mut times: Vec<f64> = out.per_worker_install_time_s.values().copied().collect();
        times.sort_by(|a, b| a.total_cmp(b));
        for t in &times[..4] {
            assert!((t - 2.5).abs() < 1e-12);
        }
        for t in &times[4..] {
            assert!((t - 2.6).abs() < 1e-12);
        }
        assert!((out.t_bcast_s - 2.6).abs() < 1e-12);
        assert_eq!(out.bytes_sent_by_learner, 100 * MB);
    }

    #[test]
    fn install_times_monotone_in_depth() {
        let snap = PolicySnapshot::new(1, 64 * MB);
        let mut nw = net(Some(20.0 * MB as f64), 10.0 * MB as f64);
        nw.latency_per_hop_s = 0.01;
        let plan =
            plan_broadcast(BroadcastStrategy::TreePipelined, &fleet(10), &nw, &snap).unwrap();
        let out = simulate_dissemination(&plan, &nw, &snap, 1.0);
        for s in &plan.stripes {
            let mut last = 0.0;
            for w in &s.chain {
                let t = out.per_worker_install_time_s[w];
                assert!(t >= last);
                last = t;
            }
        }
    }

    #[test]
    fn t_bcast_order_statistic() {
        let times: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(measure_t_bcast(&times, 0.9, 10), 9.0);
        assert_eq!(measure_t_bcast(&times, 1.0, 10), 10.0);
        assert_eq!(measure_t_bcast(&[7.5], 0.3, 1), 7.5);
        assert_eq!(measure_t_bcast(&times[..5], 0.9, 10), f64::INFINITY);
    }

    #[test]
    fn relay_forwards_and_installs() {
        let mut mid = RelayState::new("w0", 3, 1, 2, Some("w1".into()));
        let c0 = Chunk { snapshot_version: 3, stripe_index: 1, chunk_index: 0, len_bytes: MB };
        let actions = mid.forward_on_receipt(c0).unwrap();
        assert_eq!(
            actions,
            vec![RelayAction::Forward { to: "w1".into(), chunk: c0 }]
        );
        // duplicate is a no-op
        assert!(mid.forward_on_receipt(c0).unwrap().is_empty());
        let c1 = Chunk { chunk_index: 1, ..c0 };
        let actions = mid.forward_on_receipt(c1).unwrap();
        assert_eq!(actions.len(), 2);
        assert!(matches!(actions[1], RelayAction::InstallComplete { version: 3 }));
        assert!(mid.is_installed());

        let mut leaf = RelayState::new("w1", 3, 1, 1, None);
        let actions = leaf.forward_on_receipt(c0).unwrap();
        assert_eq!(actions, vec![RelayAction::InstallComplete { version: 3 }]);

        // wrong stripe signals a mis-planned topology
        let stray = Chunk { stripe_index: 0, ..c0 };
        assert!(matches!(
            leaf.forward_on_receipt(stray),
            Err(BroadcastError::UnassignedStripe { .. })
        ));
    }
}
