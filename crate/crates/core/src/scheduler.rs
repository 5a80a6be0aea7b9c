//! Cost-aware provisioning and closed-loop capacity control.
//!
//! Workers are ranked by unit throughput cost `rho_i = c_i / mu_i` and the
//! cheapest prefix whose cumulative throughput meets the requirement is
//! activated. The greedy rule is a practical approximation, not an optimum
//! (a brute-force oracle exists in the tests). At run time the scheduler
//! compares the effective pool capacity `sum a_i(t) * mu_i(t)` against
//! `mu_target = gamma * mu_min` and reacts only after sustained deviation,
//! avoiding reconfiguration churn.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("unknown worker id: {0}")]
    UnknownWorker(String),
    #[error("no price listed for gpu class: {0}")]
    UnknownGpuClass(String),
    #[error("negative gpu hours for class {0}")]
    NegativeHours(String),
}

/// Static description of a rollout worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSpec {
    pub id: String,
    /// Effective end-to-end rollout throughput (rollouts/s).
    pub mu_rollouts_per_s: f64,
    pub cost_per_hour: f64,
    /// Download cap used by dissemination planning (bytes/s).
    pub link_bytes_per_s: f64,
}

impl WorkerSpec {
    /// Unit throughput cost: dollars per hour per rollout/s of capacity.
    pub fn unit_cost(&self) -> f64 {
        self.cost_per_hour / self.mu_rollouts_per_s
    }
}

/// Live view of a worker: availability and throughput estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub spec: WorkerSpec,
    pub available: bool,
    pub mu_estimate: f64,
    pub last_heartbeat_s: f64,
    pub installed_version: u64,
}

impl WorkerState {
    pub fn new(spec: WorkerSpec, now_s: f64) -> Self {
        let mu = spec.mu_rollouts_per_s;
        Self {
            spec,
            available: true,
            mu_estimate: mu,
            last_heartbeat_s: now_s,
            installed_version: 0,
        }
    }
}

/// Hourly rental prices per GPU class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub price_per_gpu_hour: BTreeMap<String, f64>,
}

impl PriceTable {
    pub fn with(entries: &[(&str, f64)]) -> Self {
        Self {
            price_per_gpu_hour: entries
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        }
    }
}

/// Effective pool capacity: the availability-masked sum of throughput
/// estimates.
pub fn effective_pool(states: &[WorkerState]) -> f64 {
    states
        .iter()
        .filter(|s| s.available)
        .map(|s| s.mu_estimate)
        .sum()
}

/// Result of greedy provisioning. `selected` preserves the rho ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct ProvisionResult {
    pub selected: Vec<String>,
    pub total_mu: f64,
    pub total_cost_per_hour: f64,
    pub feasible: bool,
    /// Capacity still missing when the whole fleet is insufficient.
    pub shortfall: f64,
}

/// Sort key: ascending unit cost, then cost, then id.
fn rho_order(a: &WorkerSpec, b: &WorkerSpec) -> std::cmp::Ordering {
    a.unit_cost()
        .total_cmp(&b.unit_cost())
        .then_with(|| a.cost_per_hour.total_cmp(&b.cost_per_hour))
        .then_with(|| a.id.cmp(&b.id))
}

/// Activate the cheapest subset (by unit throughput cost) whose cumulative
/// throughput reaches `mu_required`.
pub fn greedy_provision(candidates: &[WorkerSpec], mu_required: f64) -> ProvisionResult {
    debug_assert!(mu_required >= 0.0);
    let mut ordered: Vec<&WorkerSpec> = candidates.iter().collect();
    ordered.sort_by(|a, b| rho_order(a, b));
    let mut selected = Vec::new();
    let mut total_mu = 0.0;
    let mut total_cost = 0.0;
    for w in ordered {
        if total_mu >= mu_required {
            break;
        }
        selected.push(w.id.clone());
        total_mu += w.mu_rollouts_per_s;
        total_cost += w.cost_per_hour;
    }
    let feasible = total_mu >= mu_required;
    ProvisionResult {
        selected,
        total_mu,
        total_cost_per_hour: total_cost,
        feasible,
        shortfall: if feasible { 0.0 } else { mu_required - total_mu },
    }
}

/// Hysteresis parameters for the control loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPolicy {
    /// Consecutive deviating ticks before acting.
    pub sustained_window_ticks: u32,
    /// Release workers only above `release_ratio * mu_target`.
    pub release_ratio: f64,
    /// Heartbeats older than this mark a worker unavailable.
    pub heartbeat_timeout_s: f64,
    /// EWMA smoothing factor for throughput estimates.
    pub ewma_alpha: f64,
}

impl Default for ControlPolicy {
    fn default() -> Self {
        Self {
            sustained_window_ticks: 3,
            release_ratio: 1.5,
            heartbeat_timeout_s: 30.0,
            ewma_alpha: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlAction {
    Activate(String),
    Release(String),
}

/// One row of the control decision log.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLogRow {
    pub tick: u64,
    pub pool: f64,
    pub target: f64,
    pub action: String,
    pub active_cost_per_hour: f64,
}

/// Owns worker states and the activation set; driven by a single control
/// loop. Heartbeats arrive as messages and are applied serially.
#[derive(Debug)]
pub struct Scheduler {
    workers: BTreeMap<String, WorkerState>,
    active: BTreeMap<String, bool>,
    policy: ControlPolicy,
    below_ticks: u32,
    above_ticks: u32,
    tick: u64,
    log: Vec<ControlLogRow>,
}

impl Scheduler {
    pub fn new(candidates: &[WorkerSpec], policy: ControlPolicy, now_s: f64) -> Self {
        let workers: BTreeMap<String, WorkerState> = candidates
            .iter()
            .map(|w| (w.id.clone(), WorkerState::new(w.clone(), now_s)))
            .collect();
        let active = workers.keys().map(|k| (k.clone(), false)).collect();
        Self {
            workers,
            active,
            policy,
            below_ticks: 0,
            above_ticks: 0,
            tick: 0,
            log: Vec::new(),
        }
    }

    pub fn policy(&self) -> &ControlPolicy {
        &self.policy
    }

    pub fn control_log(&self) -> &[ControlLogRow] {
        &self.log
    }

    pub fn is_active(&self, id: &str) -> bool {
        self.active.get(id).copied().unwrap_or(false)
    }

    pub fn active_states(&self) -> Vec<&WorkerState> {
        self.workers
            .iter()
            .filter(|(id, _)| self.is_active(id))
            .map(|(_, s)| s)
            .collect()
    }

    pub fn state(&self, id: &str) -> Option<&WorkerState> {
        self.workers.get(id)
    }

    /// Activate an initial set without going through hysteresis (start-up).
    pub fn activate_initial(&mut self, ids: &[String]) {
        for id in ids {
            if let Some(flag) = self.active.get_mut(id) {
                *flag = true;
            }
        }
    }

    /// Record a heartbeat for a known worker.
    pub fn heartbeat(&mut self, worker_id: &str, now_s: f64) -> Result<(), SchedulerError> {
        let state = self
            .workers
            .get_mut(worker_id)
            .ok_or_else(|| SchedulerError::UnknownWorker(worker_id.to_string()))?;
        state.last_heartbeat_s = now_s;
        state.available = true;
        Ok(())
    }

    /// Recompute availability from heartbeat age.
    pub fn mark_availability(&mut self, now_s: f64) {
        for state in self.workers.values_mut() {
            state.available = now_s - state.last_heartbeat_s <= self.policy.heartbeat_timeout_s;
        }
    }

    /// Fold an observed delivery rate into the worker's throughput estimate.
    pub fn record_delivery_rate(
        &mut self,
        worker_id: &str,
        observed_rate: f64,
    ) -> Result<(), SchedulerError> {
        let state = self
            .workers
            .get_mut(worker_id)
            .ok_or_else(|| SchedulerError::UnknownWorker(worker_id.to_string()))?;
        let a = self.policy.ewma_alpha;
        state.mu_estimate = a * observed_rate + (1.0 - a) * state.mu_estimate;
        Ok(())
    }

    /// Effective capacity of the currently active pool.
    pub fn active_pool_capacity(&self) -> f64 {
        self.workers
            .iter()
            .filter(|(id, s)| self.is_active(id) && s.available)
            .map(|(_, s)| s.mu_estimate)
            .sum()
    }

    fn active_cost_per_hour(&self) -> f64 {
        self.workers
            .iter()
            .filter(|(id, _)| self.is_active(id))
            .map(|(_, s)| s.spec.cost_per_hour)
            .sum()
    }

    /// One control tick: compare the effective pool against the target and
    /// act only after `sustained_window_ticks` consecutive deviations.
    /// Activation adds lowest-rho inactive workers until the target is met;
    /// release drops highest-rho active workers while staying above it.
    pub fn control_step(&mut self, mu_target: f64, now_s: f64) -> Vec<ControlAction> {
        self.tick += 1;
        self.mark_availability(now_s);
        let pool = self.active_pool_capacity();
        let window = self.policy.sustained_window_ticks;
        let mut actions = Vec::new();

        if pool < mu_target {
            self.below_ticks += 1;
            self.above_ticks = 0;
        } else if pool > self.policy.release_ratio * mu_target {
            self.above_ticks += 1;
            self.below_ticks = 0;
        } else {
            self.below_ticks = 0;
            self.above_ticks = 0;
        }

        if self.below_ticks >= window {
            let mut inactive: Vec<&WorkerState> = self
                .workers
                .iter()
                .filter(|(id, s)| !self.is_active(id) && s.available)
                .map(|(_, s)| s)
                .collect();
            inactive.sort_by(|a, b| rho_order(&a.spec, &b.spec));
            let mut pool = pool;
            let mut to_activate = Vec::new();
            for s in inactive {
                if pool >= mu_target {
                    break;
                }
                pool += s.mu_estimate;
                to_activate.push(s.spec.id.clone());
            }
            for id in to_activate {
                self.active.insert(id.clone(), true);
                actions.push(ControlAction::Activate(id));
            }
            self.below_ticks = 0;
        } else if self.above_ticks >= window {
            let mut active: Vec<&WorkerState> = self
                .workers
                .iter()
                .filter(|(id, _)| self.is_active(id))
                .map(|(_, s)| s)
                .collect();
            // Most expensive per unit throughput goes first.
            active.sort_by(|a, b| rho_order(&b.spec, &a.spec));
            let mut pool = pool;
            let mut to_release = Vec::new();
            for s in active {
                let remaining = pool - if s.available { s.mu_estimate } else { 0.0 };
                if remaining < mu_target {
                    continue;
                }
                pool = remaining;
                to_release.push(s.spec.id.clone());
            }
            for id in to_release {
                self.active.insert(id.clone(), false);
                actions.push(ControlAction::Release(id));
            }
            self.above_ticks = 0;
        }

        let action_str = if actions.is_empty() {
            "none".to_string()
        } else {
            actions
                .iter()
                .map(|a| match a {
                    ControlAction::Activate(id) => format!("activate:{id}"),
                    ControlAction::Release(id) => format!("release:{id}"),
                })
                .collect::<Vec<_>>()
                .join("|")
        };
        self.log.push(ControlLogRow {
            tick: self.tick,
            pool,
            target: mu_target,
            action: action_str,
            active_cost_per_hour: self.active_cost_per_hour(),
        });
        actions
    }
}

/// Dollar cost of a usage ledger: `sum over classes of price * gpu_hours`.
pub fn dollar_cost(
    usage: &[(String, f64)],
    prices: &PriceTable,
) -> Result<f64, SchedulerError> {
    let mut total = 0.0;
    for (class, hours) in usage {
        if *hours < 0.0 {
            return Err(SchedulerError::NegativeHours(class.clone()));
        }
        let price = prices
            .price_per_gpu_hour
            .get(class)
            .ok_or_else(|| SchedulerError::UnknownGpuClass(class.clone()))?;
        total += price * hours;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: &str, mu: f64, cost: f64) -> WorkerSpec {
        WorkerSpec {
            id: id.into(),
            mu_rollouts_per_s: mu,
            cost_per_hour: cost,
            link_bytes_per_s: 12.5e6,
        }
    }

    #[test]
    fn effective_pool_is_masked_sum() {
        let mut states = vec![
            WorkerState::new(spec("a", 5.0, 1.0), 0.0),
            WorkerState::new(spec("b", 10.0, 1.0), 0.0),
            WorkerState::new(spec("c", 4.0, 1.0), 0.0),
        ];
        states[1].available = false;
        assert_eq!(effective_pool(&states), 9.0);
        states[0].available = false;
        states[2].available = false;
        assert_eq!(effective_pool(&states), 0.0);
        let single = vec![WorkerState::new(spec("solo", 7.0, 1.0), 0.0)];
        assert_eq!(effective_pool(&single), 7.0);
    }

    #[test]
    fn greedy_takes_cheapest_prefix() {
        let workers = vec![spec("w1", 5.0, 1.0), spec("w2", 10.0, 3.0), spec("w3", 4.0, 2.0)];
        let res = greedy_provision(&workers, 12.0);
        assert!(res.feasible);
        assert_eq!(res.selected, vec!["w1", "w2"]); // rho 0.2, 0.3, 0.5
        assert_eq!(res.total_cost_per_hour, 4.0);

        let empty = greedy_provision(&workers, 0.0);
        assert!(empty.selected.is_empty());
        assert!(empty.feasible);
    }

    #[test]
    fn greedy_is_a_heuristic_not_an_optimum() {
        // Documented counterexample: greedy pays 2.2 where the optimum is 1.2.
        let workers = vec![spec("w1", 9.0, 1.0), spec("w2", 10.0, 1.2), spec("w3", 2.0, 1.0)];
        let res = greedy_provision(&workers, 10.0);
        assert_eq!(res.selected, vec!["w1", "w2"]);
        assert_eq!(res.total_cost_per_hour, 1.0 + 1.2);
    }

    #[test]
    fn greedy_reports_shortfall() {
        let workers = vec![spec("w1", 2.0, 1.0)];
        let res = greedy_provision(&workers, 10.0);
        assert!(!res.feasible);
        assert_eq!(res.selected, vec!["w1"]);
        assert!((res.shortfall - 8.0).abs() < 1e-12);
    }

    #[test]
    fn control_acts_only_after_sustained_deviation() {
        let fleet = vec![
            spec("a", 8.0, 1.0),
            spec("b", 8.0, 2.0),
            spec("c", 8.0, 4.0),
        ];
        let mut sched = Scheduler::new(&fleet, ControlPolicy::default(), 0.0);
        sched.activate_initial(&["a".into()]);
        // pool 8 < target 16 for one tick: no action yet
        assert!(sched.control_step(16.0, 1.0).is_empty());
        assert!(sched.control_step(16.0, 2.0).is_empty());
        // third consecutive deviation activates the cheapest inactive worker
        let actions = sched.control_step(16.0, 3.0);
        assert_eq!(actions, vec![ControlAction::Activate("b".into())]);
        assert!(sched.active_pool_capacity() >= 16.0);
    }

    #[test]
    fn control_releases_expensive_surplus() {
        let fleet = vec![
            spec("cheap", 10.0, 1.0),
            spec("mid", 10.0, 2.0),
            spec("pricey", 10.0, 8.0),
        ];
        let mut sched = Scheduler::new(&fleet, ControlPolicy::default(), 0.0);
        sched.activate_initial(&["cheap".into(), "mid".into(), "pricey".into()]);
        // pool 30 > 1.5 * 16 = 24 for three ticks
        assert!(sched.control_step(16.0, 1.0).is_empty());
        assert!(sched.control_step(16.0, 2.0).is_empty());
        let actions = sched.control_step(16.0, 3.0);
        // releases the highest-rho worker but keeps the pool above target
        assert_eq!(actions, vec![ControlAction::Release("pricey".into())]);
        assert!(sched.active_pool_capacity() >= 16.0);
    }

    #[test]
    fn heartbeat_timeout_flips_availability() {
        let fleet = vec![spec("a", 5.0, 1.0)];
        let mut sched = Scheduler::new(&fleet, ControlPolicy::default(), 0.0);
        sched.heartbeat("a", 10.0).unwrap();
        sched.mark_availability(15.0);
        assert!(sched.state("a").unwrap().available);
        sched.mark_availability(50.0); // 40 s > 30 s timeout
        assert!(!sched.state("a").unwrap().available);
        sched.heartbeat("a", 60.0).unwrap();
        sched.mark_availability(61.0);
        assert!(sched.state("a").unwrap().available);
        assert_eq!(
            sched.heartbeat("ghost", 0.0),
            Err(SchedulerError::UnknownWorker("ghost".into()))
        );
    }

    #[test]
    fn ewma_estimate_tracks_deliveries() {
        let fleet = vec![spec("a", 10.0, 1.0)];
        let mut sched = Scheduler::new(&fleet, ControlPolicy::default(), 0.0);
        sched.record_delivery_rate("a", 5.0).unwrap();
        let est = sched.state("a").unwrap().mu_estimate;
        assert!((est - (0.3 * 5.0 + 0.7 * 10.0)).abs() < 1e-12);
    }

    #[test]
    fn dollar_cost_examples() {
        let prices = PriceTable::with(&[("A100 80GB", 3.06), ("RTX 5090", 0.35)]);
        // 4 GPUs for 2 hours
        let cost = dollar_cost(&[("A100 80GB".to_string(), 8.0)], &prices).unwrap();
        assert_eq!(cost, 24.48);
        let cost = dollar_cost(&[("RTX 5090".to_string(), 10.0)], &prices).unwrap();
        assert_eq!(cost, 3.50);
        assert_eq!(dollar_cost(&[], &prices).unwrap(), 0.0);
        assert_eq!(
            dollar_cost(&[("H100".to_string(), 1.0)], &prices),
            Err(SchedulerError::UnknownGpuClass("H100".into()))
        );
    }

    #[test]
    fn cost_is_additive_and_order_independent() {
        let prices = PriceTable::with(&[("A100 80GB", 3.06), ("RTX 5090", 0.35)]);
        let a = ("A100 80GB".to_string(), 3.0);
        let b = ("RTX 5090".to_string(), 7.0);
        let ab = dollar_cost(&[a.clone(), b.clone()], &prices).unwrap();
        let ba = dollar_cost(&[b.clone(), a.clone()], &prices).unwrap();
        assert_eq!(ab, ba);
        let separate = dollar_cost(&[a], &prices).unwrap() + dollar_cost(&[b], &prices).unwrap();
        assert!((ab - separate).abs() < 1e-12);
    }
}
