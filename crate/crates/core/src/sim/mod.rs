//! Deterministic discrete-event execution of the full training loop.
//!
//! The engine runs the learner loop (a step whenever R admissible records
//! exist, publication every kappa steps), dissemination through broadcast
//! plans at chunk granularity, and rollout workers as rate processes
//! feeding the versioned replay buffer. Identical seeds yield byte-identical
//! traces; all derived metrics (bubble ratio, staleness trace, observed
//! broadcast latency, dollar cost) are computed from the event log alone.

mod engine;
mod report;

pub use engine::run;
pub use report::compute_report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broadcast::{BroadcastStrategy, NetworkConfig};
use crate::planner::PlannerInputs;
use crate::scheduler::WorkerSpec;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid sim config: {0}")]
    InvalidConfig(String),
    #[error("planner: {0}")]
    Planner(#[from] crate::planner::PlannerError),
    #[error("broadcast: {0}")]
    Broadcast(#[from] crate::broadcast::BroadcastError),
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

/// Full simulation parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub planner: PlannerInputs,
    pub workers: Vec<WorkerSpec>,
    pub net: NetworkConfig,
    pub broadcast_strategy: BroadcastStrategy,
    /// Snapshot size disseminated at every publication.
    pub snapshot_bytes: u64,
    pub total_steps: u32,
    pub rng_seed: u64,
    /// Coefficient of variation of rollout generation times; 0 disables
    /// jitter entirely (no RNG draws on the generation path).
    pub rollout_jitter_cv: f64,
    /// Suppress new-version rollouts until the whole fleet has installed.
    pub worst_case: bool,
    /// Activate the cheapest capacity-meeting subset at start and run the
    /// closed-loop controller each publication; when false the entire
    /// configured fleet is active for the whole run.
    pub enable_provisioning: bool,
    /// Completion fraction for the observed broadcast latency; defaults to
    /// `1 / safety_factor` when unset.
    pub completion_fraction_q: Option<f64>,
    pub learner_cost_per_hour: f64,
}

impl SimConfig {
    pub fn q_fraction(&self) -> f64 {
        self.completion_fraction_q
            .unwrap_or(1.0 / self.planner.safety_factor)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.planner.validate()?;
        self.net.validate()?;
        if self.total_steps < 1 {
            return Err(SimError::InvalidConfig("total_steps must be >= 1".into()));
        }
        if self.rollout_jitter_cv < 0.0 || !self.rollout_jitter_cv.is_finite() {
            return Err(SimError::InvalidConfig(
                "rollout_jitter_cv must be finite and >= 0".into(),
            ));
        }
        if self.snapshot_bytes == 0 {
            return Err(SimError::InvalidConfig("snapshot_bytes must be > 0".into()));
        }
        let q = self.q_fraction();
        if !(q > 0.0 && q <= 1.0) {
            return Err(SimError::InvalidConfig(format!(
                "completion fraction must be in (0,1], got {q}"
            )));
        }
        if self.learner_cost_per_hour < 0.0 {
            return Err(SimError::InvalidConfig(
                "learner_cost_per_hour must be >= 0".into(),
            ));
        }
        let mut ids: Vec<&str> = self.workers.iter().map(|w| w.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.workers.len() {
            return Err(SimError::InvalidConfig("duplicate worker ids".into()));
        }
        for w in &self.workers {
            if !(w.mu_rollouts_per_s > 0.0) {
                return Err(SimError::InvalidConfig(format!(
                    "worker {} must have positive throughput",
                    w.id
                )));
            }
        }
        Ok(())
    }
}

/// Trace event kinds, ordered by tie-break priority within one timestamp:
/// installs before rollout deliveries before step boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    StepStart,
    StepEnd,
    Publish,
    ChunkForward,
    Install,
    RolloutDelivered,
    BatchSampled,
    Evict,
    IdleStart,
    IdleEnd,
    Activate,
    Release,
}

impl TraceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraceKind::StepStart => "step_start",
            TraceKind::StepEnd => "step_end",
            TraceKind::Publish => "publish",
            TraceKind::ChunkForward => "chunk_forward",
            TraceKind::Install => "install",
            TraceKind::RolloutDelivered => "rollout_delivered",
            TraceKind::BatchSampled => "batch_sampled",
            TraceKind::Evict => "evict",
            TraceKind::IdleStart => "idle_start",
            TraceKind::IdleEnd => "idle_end",
            TraceKind::Activate => "activate",
            TraceKind::Release => "release",
        }
    }
}

/// One trace row. Field use per kind:
/// `worker` the acting worker, `peer` the forwarding target, `version` the
/// snapshot/record version involved, `learner_version` the learner update
/// index at the event, `count` a cardinality (batch size, evictions, chunk
/// index), `value` a scalar (staleness, idle seconds, cost rate,
/// acceptance flag).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time_s: f64,
    pub kind: TraceKind,
    pub worker: Option<u32>,
    pub peer: Option<u32>,
    pub version: Option<u64>,
    pub learner_version: Option<u64>,
    pub count: Option<u64>,
    pub value: Option<f64>,
}

/// Run-level constants needed to interpret a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub schema_version: u32,
    pub rng_seed: u64,
    pub total_steps: u32,
    pub t_train_s: f64,
    pub kappa: u32,
    pub staleness_budget: u32,
    pub rollouts_per_step: u32,
    pub q_fraction: f64,
    pub learner_cost_per_hour: f64,
    pub worker_ids: Vec<String>,
}

/// Time-ordered event log of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub meta: TraceMeta,
    pub events: Vec<TraceEvent>,
}

impl SimTrace {
    /// Render as CSV. Meta fields become leading comment lines so the file
    /// is self-contained; an optional timestamp comment carries wall-clock
    /// provenance and is omitted for byte-identical reruns.
    pub fn to_csv(&self, timestamp_unix: Option<u64>) -> String {
        let mut out = String::new();
        if let Some(ts) = timestamp_unix {
            out.push_str(&format!("# generated_at_unix={ts}\n"));
        }
        out.push_str(&format!("# schema_version={}\n", self.meta.schema_version));
        out.push_str(&format!("# rng_seed={}\n", self.meta.rng_seed));
        out.push_str(&format!("# total_steps={}\n", self.meta.total_steps));
        out.push_str(&format!("# t_train_s={}\n", self.meta.t_train_s));
        out.push_str(&format!("# kappa={}\n", self.meta.kappa));
        out.push_str(&format!("# staleness_budget={}\n", self.meta.staleness_budget));
        out.push_str(&format!("# rollouts_per_step={}\n", self.meta.rollouts_per_step));
        out.push_str(&format!("# q_fraction={}\n", self.meta.q_fraction));
        out.push_str(&format!(
            "# learner_cost_per_hour={}\n",
            self.meta.learner_cost_per_hour
        ));
        out.push_str(&format!("# workers={}\n", self.meta.worker_ids.join("|")));
        out.push_str("time_s,kind,worker,peer,version,learner_version,count,value\n");
        for e in &self.events {
            let opt_u32 = |v: &Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
            let opt_u64 = |v: &Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
            let opt_f64 = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.time_s,
                e.kind.as_str(),
                opt_u32(&e.worker),
                opt_u32(&e.peer),
                opt_u64(&e.version),
                opt_u64(&e.learner_version),
                opt_u64(&e.count),
                opt_f64(&e.value),
            ));
        }
        out
    }
}

/// Metrics derived from one run's trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `T_idle / (T_idle + T_train_active)`; 1.0 when the learner never
    /// completed a step.
    pub bubble_ratio: f64,
    /// Batch staleness per completed step.
    pub staleness_series: Vec<u32>,
    pub delta_max: u32,
    /// Fraction-q dissemination completion, maximum over publications;
    /// absent when no publication completed within the run.
    pub t_bcast_observed_s: Option<f64>,
    pub total_cost: f64,
    pub rollouts_generated: u64,
    pub rollouts_consumed: u64,
    pub rollouts_evicted: u64,
    pub steps_completed: u32,
    pub idle_time_s: f64,
    pub train_time_s: f64,
    pub final_time_s: f64,
}

/// Run with worst-case dissemination semantics (fleet-wide version switch
/// only after every worker has installed).
pub fn worst_case_mode(config: &SimConfig) -> Result<(SimTrace, RunReport), SimError> {
    let mut cfg = config.clone();
    cfg.worst_case = true;
    run(&cfg)
}

/// One sweep row: pool size against the learner idle fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSweepRow {
    pub pool_size: usize,
    pub mu_pool: f64,
    pub bubble_ratio: f64,
    pub delta_max: u32,
}

/// Run one simulation per requested pool size. Sizes beyond the configured
/// fleet replicate the existing worker specs round-robin under fresh ids.
pub fn sweep_pool_size(base: &SimConfig, sizes: &[usize]) -> Result<Vec<PoolSweepRow>, SimError> {
    if base.workers.is_empty() {
        return Err(SimError::InvalidConfig(
            "pool sweep needs at least one template worker".into(),
        ));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 {
            return Err(SimError::InvalidConfig("pool size 0 in sweep".into()));
        }
        let mut cfg = base.clone();
        cfg.workers = (0..size)
            .map(|i| {
                let template = &base.workers[i % base.workers.len()];
                WorkerSpec {
                    id: format!("sw{i:03}"),
                    ..template.clone()
                }
            })
            .collect();
        let (_, report) = run(&cfg)?;
        let mu_pool: f64 = cfg.workers.iter().map(|w| w.mu_rollouts_per_s).sum();
        rows.push(PoolSweepRow {
            pool_size: size,
            mu_pool,
            bubble_ratio: report.bubble_ratio,
            delta_max: report.delta_max,
        });
    }
    Ok(rows)
}
