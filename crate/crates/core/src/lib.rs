//! rollsim: orchestration math and a deterministic simulator for
//! staleness-bounded distributed RL post-training.
//!
//! A centralized learner consumes fixed-size batches of version-tagged
//! rollouts from a replay buffer while a distributed worker fleet generates
//! them under periodically published policy snapshots. This crate provides
//! the pieces that make such a system provisionable and testable at desk
//! scale:
//!
//! * [`planner`] — overlap condition, capacity rule and staleness bounds.
//! * [`buffer`] — versioned replay with bounded-staleness admission.
//! * [`broadcast`] — star and striped-chain pipelined snapshot dissemination.
//! * [`scheduler`] — cost-aware greedy provisioning and closed-loop control.
//! * [`sim`] — deterministic discrete-event execution of the whole loop.
//! * [`dataplane`] — task-adapter kernels: chat standardization, turn-aware
//!   masks, group-normalized advantages and the clipped surrogate objective.

pub mod broadcast;
pub mod buffer;
pub mod dataplane;
pub mod planner;
pub mod record;
pub mod scheduler;
pub mod sim;

pub use planner::{
    choose_kappa, compute_mu_min, overlap_holds, staleness_bound_baseline,
    staleness_bound_tightened, staleness_bounds, CapacityResult, PlannerInputs, StalenessBounds,
};
pub use record::{Metadata, TrajectoryRecord};
