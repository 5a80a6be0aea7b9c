//! Capacity planning for overlapped asynchronous RL training.
//!
//! Pure functions relating per-step training time, snapshot dissemination
//! latency and aggregate rollout throughput. The central quantities:
//!
//! ```text
//! overlap:   kappa * T_train >= T_bcast + kappa * R / mu_pool
//! capacity:  mu_min = kappa * R / (kappa * T_train - T_bcast)
//! baseline:  delta_max <= kappa + ceil((T_bcast + R/mu_pool) / T_train) - 1
//! pool-free: delta_max <= kappa + ceil((1 - 1/kappa) * T_bcast / T_train)
//! ```
//!
//! A pool that satisfies the overlap condition keeps the learner free of
//! idle bubbles; the staleness bounds tie the publication period `kappa`
//! to a user staleness budget `S` via the default choice `kappa = S - 1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used to stabilize ceilings and boundary comparisons.
/// Formulas below take exact ceilings of real ratios; without a guard,
/// floating rounding at an exact boundary would bump a ceiling by one.
pub const REL_TOL: f64 = 1e-9;

/// Ceiling with a relative snap: values within `REL_TOL * |x|` of an
/// integer are treated as that integer before the ceiling is applied.
pub fn ceil_rel(x: f64) -> f64 {
    let nearest = x.round();
    if (x - nearest).abs() <= REL_TOL * x.abs() {
        nearest
    } else {
        x.ceil()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PlannerError {
    #[error("invalid planner inputs: {0}")]
    InvalidInputs(String),
    #[error("staleness budget {0} too small: publication period must be >= 2, so budget must be >= 3")]
    BudgetTooSmall(u32),
}

/// Inputs to the capacity and staleness computations.
///
/// `t_bcast_s` is the learner-visible dissemination latency, including any
/// model reload overhead; it is measured (by the simulator) or supplied by
/// configuration, never predicted here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerInputs {
    /// Wall-clock seconds per learner update (T_train).
    pub t_train_s: f64,
    /// Learner-visible dissemination latency in seconds (T_bcast).
    pub t_bcast_s: f64,
    /// Rollouts consumed per learner update (R).
    pub rollouts_per_step: u32,
    /// Publication period in learner updates (kappa); must be >= 2.
    pub kappa: u32,
    /// Staleness budget in learner updates (S); must be >= 3.
    pub staleness_budget: u32,
    /// Capacity inflation factor (gamma) applied on top of mu_min; > 1.
    pub safety_factor: f64,
}

impl PlannerInputs {
    pub fn validate(&self) -> Result<(), PlannerError> {
        if !(self.t_train_s > 0.0) || !self.t_train_s.is_finite() {
            return Err(PlannerError::InvalidInputs(format!(
                "t_train_s must be positive and finite, got {}",
                self.t_train_s
            )));
        }
        if !(self.t_bcast_s >= 0.0) || !self.t_bcast_s.is_finite() {
            return Err(PlannerError::InvalidInputs(format!(
                "t_bcast_s must be non-negative and finite, got {}",
                self.t_bcast_s
            )));
        }
        if self.rollouts_per_step < 1 {
            return Err(PlannerError::InvalidInputs(
                "rollouts_per_step must be >= 1".into(),
            ));
        }
        if self.kappa < 2 {
            return Err(PlannerError::InvalidInputs(format!(
                "kappa must be >= 2, got {}",
                self.kappa
            )));
        }
        if self.staleness_budget < 3 {
            return Err(PlannerError::InvalidInputs(format!(
                "staleness_budget must be >= 3, got {}",
                self.staleness_budget
            )));
        }
        if !(self.safety_factor > 1.0) || !self.safety_factor.is_finite() {
            return Err(PlannerError::InvalidInputs(format!(
                "safety_factor must be > 1, got {}",
                self.safety_factor
            )));
        }
        Ok(())
    }
}

/// Minimum and target aggregate rollout throughput for a configuration.
///
/// Infeasible means `kappa * T_train <= T_bcast`: the publication period is
/// shorter than dissemination itself and no finite pool avoids bubbles.
/// Infeasibility is a reported state, not an error; callers decide policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    pub feasible: bool,
    /// Minimum aggregate throughput (rollouts/s); `None` when infeasible.
    pub mu_min: Option<f64>,
    /// `safety_factor * mu_min`; `None` when infeasible.
    pub mu_target: Option<f64>,
}

/// Worst-case staleness bounds in learner updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StalenessBounds {
    /// Conservative bound `kappa + ceil((T_bcast + R/mu_pool)/T_train) - 1`.
    pub baseline: u32,
    /// Pool-free bound `kappa + ceil((1 - 1/kappa) * T_bcast/T_train)`,
    /// valid whenever the overlap condition holds.
    pub tightened: u32,
    /// Whether the conservative bound fits within the staleness budget.
    pub satisfies_budget: bool,
}

/// Aggregate capacity requirement: `mu_min = kappa * R / (kappa*T_train - T_bcast)`.
pub fn compute_mu_min(inputs: &PlannerInputs) -> CapacityResult {
    let kappa = inputs.kappa as f64;
    let denom = kappa * inputs.t_train_s - inputs.t_bcast_s;
    if denom <= 0.0 {
        return CapacityResult {
            feasible: false,
            mu_min: None,
            mu_target: None,
        };
    }
    let mu_min = kappa * inputs.rollouts_per_step as f64 / denom;
    CapacityResult {
        feasible: true,
        mu_min: Some(mu_min),
        mu_target: Some(inputs.safety_factor * mu_min),
    }
}

/// Overlap condition: rollout generation plus dissemination fit within one
/// publication period. Equality counts as holding (boundary provisioning).
pub fn overlap_holds(inputs: &PlannerInputs, mu_pool: f64) -> bool {
    debug_assert!(mu_pool > 0.0);
    let kappa = inputs.kappa as f64;
    let lhs = kappa * inputs.t_train_s;
    let rhs = inputs.t_bcast_s + kappa * inputs.rollouts_per_step as f64 / mu_pool;
    lhs >= rhs - REL_TOL * lhs.abs().max(rhs.abs())
}

/// Default publication period for a staleness budget: `kappa = S - 1`.
pub fn choose_kappa(staleness_budget: u32) -> Result<u32, PlannerError> {
    if staleness_budget < 3 {
        return Err(PlannerError::BudgetTooSmall(staleness_budget));
    }
    Ok(staleness_budget - 1)
}

/// Conservative staleness bound for a pool of aggregate throughput `mu_pool`,
/// assuming no rollout is generated from a new snapshot until dissemination
/// completes: `kappa + ceil((T_bcast + R/mu_pool)/T_train) - 1`.
pub fn staleness_bound_baseline(inputs: &PlannerInputs, mu_pool: f64) -> u32 {
    debug_assert!(mu_pool > 0.0);
    let numerator = inputs.t_bcast_s + inputs.rollouts_per_step as f64 / mu_pool;
    let steps = ceil_rel(numerator / inputs.t_train_s);
    inputs.kappa + steps as u32 - 1
}

/// Pool-free staleness bound assuming the overlap condition holds:
/// `kappa + ceil((1 - 1/kappa) * T_bcast/T_train)`.
pub fn staleness_bound_tightened(inputs: &PlannerInputs) -> u32 {
    let kappa = inputs.kappa as f64;
    let ratio = (1.0 - 1.0 / kappa) * inputs.t_bcast_s / inputs.t_train_s;
    inputs.kappa + ceil_rel(ratio) as u32
}

/// Both staleness bounds plus a budget check against `inputs.staleness_budget`.
pub fn staleness_bounds(inputs: &PlannerInputs, mu_pool: f64) -> StalenessBounds {
    let baseline = staleness_bound_baseline(inputs, mu_pool);
    let tightened = staleness_bound_tightened(inputs);
    StalenessBounds {
        baseline,
        tightened,
        satisfies_budget: baseline <= inputs.staleness_budget,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inputs(t_train: f64, t_bcast: f64, r: u32, kappa: u32) -> PlannerInputs {
        PlannerInputs {
            t_train_s: t_train,
            t_bcast_s: t_bcast,
            rollouts_per_step: r,
            kappa,
            staleness_budget: kappa + 1,
            safety_factor: 1.1,
        }
    }

    #[test]
    fn mu_min_hand_arithmetic() {
        // kappa*R / (kappa*T_train - T_bcast) = 256 / 16
        let cap = compute_mu_min(&inputs(10.0, 4.0, 128, 2));
        assert!(cap.feasible);
        assert_eq!(cap.mu_min, Some(16.0));
        assert_eq!(cap.mu_target, Some(1.1 * 16.0));
    }

    #[test]
    fn mu_min_reduces_to_rate_balance_without_broadcast() {
        let cap = compute_mu_min(&inputs(10.0, 0.0, 100, 2));
        assert_eq!(cap.mu_min, Some(10.0));
    }

    #[test]
    fn mu_min_infeasible_when_period_shorter_than_broadcast() {
        let cap = compute_mu_min(&inputs(10.0, 25.0, 128, 2));
        assert!(!cap.feasible);
        assert_eq!(cap.mu_min, None);
        assert_eq!(cap.mu_target, None);
    }

    #[test]
    fn overlap_boundary_and_violation() {
        let p = inputs(10.0, 4.0, 128, 2);
        assert!(overlap_holds(&p, 16.0)); // 20 == 4 + 256/16, equality holds
        assert!(!overlap_holds(&p, 15.0)); // 4 + 256/15 ~ 21.07 > 20
        let balanced = inputs(10.0, 0.0, 100, 2);
        assert!(overlap_holds(&balanced, 10.0)); // exact rate balance
    }

    #[test]
    fn kappa_from_budget() {
        assert_eq!(choose_kappa(3), Ok(2));
        assert_eq!(choose_kappa(4), Ok(3));
        assert_eq!(choose_kappa(2), Err(PlannerError::BudgetTooSmall(2)));
    }

    #[test]
    fn baseline_bound_examples() {
        // ceil((8 + 128/16)/10) = ceil(1.6) = 2; 2 + 2 - 1 = 3
        assert_eq!(staleness_bound_baseline(&inputs(10.0, 8.0, 128, 2), 16.0), 3);
        // vanishing numerator still ceils to one step
        assert_eq!(staleness_bound_baseline(&inputs(10.0, 0.0, 1, 2), 1e9), 2);
    }

    #[test]
    fn baseline_bound_at_most_three_for_kappa_two_fast_broadcast() {
        // T_bcast < T_train and overlap holding imply the bound is <= 3.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t_train = rng.gen_range(1.0..50.0);
            let t_bcast = rng.gen_range(0.0..t_train * 0.999);
            let r = rng.gen_range(1..512);
            let p = inputs(t_train, t_bcast, r, 2);
            let mu_min = compute_mu_min(&p).mu_min.unwrap();
            let mu_pool = mu_min * rng.gen_range(1.0..4.0);
            assert!(overlap_holds(&p, mu_pool));
            assert!(staleness_bound_baseline(&p, mu_pool) <= 3);
        }
    }

    #[test]
    fn tightened_bound_examples() {
        assert_eq!(staleness_bound_tightened(&inputs(10.0, 8.0, 128, 2)), 3);
        assert_eq!(staleness_bound_tightened(&inputs(10.0, 0.0, 128, 2)), 2);
    }

    #[test]
    fn tightened_bound_within_budget_for_default_kappa() {
        // kappa = S - 1 and T_bcast < T_train give a bound of at most S.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = rng.gen_range(3..12u32);
            let kappa = choose_kappa(s).unwrap();
            let t_train = rng.gen_range(1.0..100.0);
            let t_bcast = rng.gen_range(0.0..t_train * 0.999);
            let p = PlannerInputs {
                staleness_budget: s,
                ..inputs(t_train, t_bcast, 64, kappa)
            };
            assert!(staleness_bound_tightened(&p) <= s);
        }
    }

    // Under the overlap condition the pool-free bound dominates the
    // pool-specific one (they meet exactly at boundary provisioning), so
    // it is safe to plan with the pool-free form before a pool exists.
    #[test]
    fn baseline_never_exceeds_tightened_under_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10_000 {
            let kappa = rng.gen_range(2..8u32);
            let t_train = rng.gen_range(0.5..60.0);
            let t_bcast = rng.gen_range(0.0..kappa as f64 * t_train * 0.99);
            let r = rng.gen_range(1..400);
            let p = PlannerInputs {
                staleness_budget: kappa + 1,
                ..inputs(t_train, t_bcast, r, kappa)
            };
            let cap = compute_mu_min(&p);
            let mu_min = match cap.mu_min {
                Some(m) => m,
                None => continue,
            };
            let mu_pool = mu_min * rng.gen_range(1.0..5.0);
            if !overlap_holds(&p, mu_pool) {
                continue;
            }
            let baseline = staleness_bound_baseline(&p, mu_pool);
            let tightened = staleness_bound_tightened(&p);
            assert!(
                baseline <= tightened,
                "baseline {} > tightened {} for {:?} mu_pool {}",
                baseline,
                tightened,
                p,
                mu_pool
            );
            assert!(baseline >= p.kappa && tightened >= p.kappa);
        }
    }

    #[test]
    fn bounds_meet_at_boundary_provisioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let kappa = rng.gen_range(2..6u32);
            let t_train = rng.gen_range(1.0..30.0);
            let t_bcast = rng.gen_range(0.01..kappa as f64 * t_train * 0.95);
            let p = PlannerInputs {
                staleness_budget: kappa + 1,
                ..inputs(t_train, t_bcast, rng.gen_range(1..300), kappa)
            };
            let mu_min = match compute_mu_min(&p).mu_min {
                Some(m) => m,
                None => continue,
            };
            assert_eq!(
                staleness_bound_baseline(&p, mu_min),
                staleness_bound_tightened(&p),
                "bounds must coincide when the pool exactly meets mu_min: {:?}",
                p
            );
        }
    }

    #[test]
    fn mu_min_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..10_000 {
            let kappa = rng.gen_range(2..8u32);
            let t_train = rng.gen_range(0.5..60.0);
            let t_bcast = rng.gen_range(0.0..(kappa as f64 * t_train * 0.99));
            let r = rng.gen_range(1..400u32);
            let base = inputs(t_train, t_bcast, r, kappa);
            let mu = |p: &PlannerInputs| compute_mu_min(p).mu_min.unwrap();

            let more_r = PlannerInputs {
                rollouts_per_step: r + rng.gen_range(1..100),
                ..base
            };
            assert!(mu(&more_r) >= mu(&base));

            let more_bcast = PlannerInputs {
                t_bcast_s: t_bcast + rng.gen_range(0.0..(kappa as f64 * t_train - t_bcast) * 0.99),
                ..base
            };
            assert!(mu(&more_bcast) >= mu(&base) - 1e-12);

            let more_train = PlannerInputs {
                t_train_s: t_train * rng.gen_range(1.0..3.0),
                ..base
            };
            assert!(mu(&more_train) <= mu(&base) + 1e-12);

            let more_kappa = PlannerInputs {
                kappa: kappa + 1,
                staleness_budget: kappa + 2,
                ..base
            };
            assert!(mu(&more_kappa) <= mu(&base) + 1e-12);
        }
    }

    #[test]
    fn overlap_is_tight_at_mu_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10_000 {
            let kappa = rng.gen_range(2..8u32);
            let t_train = rng.gen_range(0.5..60.0);
            let t_bcast = rng.gen_range(0.0..(kappa as f64 * t_train * 0.99));
            let p = inputs(t_train, t_bcast, rng.gen_range(1..400), kappa);
            let mu_min = compute_mu_min(&p).mu_min.unwrap();
            assert!(overlap_holds(&p, mu_min));
            // Any pool visibly below mu_min violates the condition.
            assert!(!overlap_holds(&p, mu_min * 0.999_999));
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        let mut p = inputs(10.0, 4.0, 128, 2);
        assert!(p.validate().is_ok());
        p.kappa = 1;
        assert!(p.validate().is_err());
        p = inputs(0.0, 4.0, 128, 2);
        assert!(p.validate().is_err());
        p = inputs(10.0, 4.0, 0, 2);
        assert!(p.validate().is_err());
        p = inputs(10.0, 4.0, 128, 2);
        p.safety_factor = 1.0;
        assert!(p.validate().is_err());
        p = inputs(10.0, 4.0, 128, 2);
        p.staleness_budget = 2;
        assert!(p.validate().is_err());
    }
}
