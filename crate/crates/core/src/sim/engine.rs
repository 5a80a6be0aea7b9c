//! Single-threaded discrete-event engine.
//!
//! Every state change flows through the event heap; ties at one timestamp
//! resolve by kind priority (install < rollout_delivered < step boundary)
//! and then by scheduling sequence number, so runs are exactly replayable.
//! Rollout generation is back-to-back per worker: a record's version tag is
//! the worker's installed version at generation start, and installs never
//! abort the generation in flight.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::broadcast::{
    plan_broadcast, simulate_dissemination, BroadcastStrategy, Chunk, PolicySnapshot, RelayAction,
    RelayState,
};
use crate::buffer::ReplayBuffer;
use crate::planner::compute_mu_min;
use crate::record::{Metadata, TrajectoryRecord};
use crate::scheduler::{greedy_provision, ControlAction, ControlPolicy, Scheduler};

use super::{RunReport, SimConfig, SimError, SimTrace, TraceEvent, TraceKind, TraceMeta};

const PRIORITY_INSTALL: u8 = 0;
const PRIORITY_ROLLOUT: u8 = 1;
const PRIORITY_STEP: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    ChunkArrival { worker: usize, chunk: Chunk },
    FleetInstall { version: u64 },
    RolloutDelivered { worker: usize },
    StepEnd,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    priority: u8,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // BinaryHeap is a max-heap; invert so the earliest event pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.priority.cmp(&self.priority))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct SimWorker {
    installed_version: u64,
    active: bool,
    generating: bool,
    /// Version tag of the generation in flight, fixed at its start; an
    /// install landing at exactly the start instant re-tags it (installs
    /// take priority over rollout events within one timestamp).
    pending_tag: u64,
    pending_gen_start: f64,
    rng: ChaCha8Rng,
    relay: Option<RelayState>,
    outbound_free_at: f64,
    delivered_since_tick: u64,
    generated_total: u64,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    workers: Vec<SimWorker>,
    buffer: ReplayBuffer,
    learner_version: u64,
    steps_done: u32,
    busy: bool,
    idle_since: Option<f64>,
    events: Vec<TraceEvent>,
    jitter: Option<LogNormal<f64>>,
    scheduler: Option<Scheduler>,
    last_tick_time: f64,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let jitter = if cfg.rollout_jitter_cv > 0.0 {
            let cv = cfg.rollout_jitter_cv;
            let sigma2 = (1.0 + cv * cv).ln();
            // mean of the multiplier is exactly 1
            let dist = LogNormal::new(-0.5 * sigma2, sigma2.sqrt())
                .map_err(|e| SimError::InvalidConfig(format!("jitter: {e}")))?;
            Some(dist)
        } else {
            None
        };
        let workers = cfg
            .workers
            .iter()
            .enumerate()
            .map(|(i, _)| SimWorker {
                installed_version: 0,
                active: false,
                generating: false,
                pending_tag: 0,
                pending_gen_start: 0.0,
                rng: ChaCha8Rng::seed_from_u64(
                    cfg.rng_seed.wrapping_add(0x9e3779b9).wrapping_mul(i as u64 + 1),
                ),
                relay: None,
                outbound_free_at: 0.0,
                delivered_since_tick: 0,
                generated_total: 0,
            })
            .collect();
        let scheduler = if cfg.enable_provisioning {
            Some(Scheduler::new(&cfg.workers, ControlPolicy::default(), 0.0))
        } else {
            None
        };
        Ok(Self {
            cfg,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            workers,
            buffer: ReplayBuffer::new(),
            learner_version: 0,
            steps_done: 0,
            busy: false,
            idle_since: None,
            events: Vec::new(),
            jitter,
            scheduler,
            last_tick_time: 0.0,
        })
    }

    fn schedule(&mut self, time: f64, priority: u8, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Event {
            time,
            priority,
            seq,
            kind,
        });
    }

    fn trace(&mut self, kind: TraceKind, ev: TraceEvent) {
        self.events.push(TraceEvent { kind, ..ev });
    }

    fn blank(&self) -> TraceEvent {
        TraceEvent {
            time_s: self.now,
            kind: TraceKind::StepStart,
            worker: None,
            peer: None,
            version: None,
            learner_version: None,
            count: None,
            value: None,
        }
    }

    fn worker_index(&self, id: &str) -> usize {
        self.cfg
            .workers
            .iter()
            .position(|w| w.id == id)
            .expect("worker id from plan belongs to the fleet")
    }

    fn activate_worker(&mut self, idx: usize) {
        if self.workers[idx].active {
            return;
        }
        self.workers[idx].active = true;
        let ev = TraceEvent {
            worker: Some(idx as u32),
            value: Some(self.cfg.workers[idx].cost_per_hour),
            ..self.blank()
        };
        self.trace(TraceKind::Activate, ev);
        self.start_generation(idx);
    }

    fn release_worker(&mut self, idx: usize) {
        if !self.workers[idx].active {
            return;
        }
        self.workers[idx].active = false;
        let ev = TraceEvent {
            worker: Some(idx as u32),
            value: Some(self.cfg.workers[idx].cost_per_hour),
            ..self.blank()
        };
        self.trace(TraceKind::Release, ev);
        // the generation in flight completes and delivers; no next one starts
    }

    fn start_generation(&mut self, idx: usize) {
        let w = &mut self.workers[idx];
        if w.generating || !w.active {
            return;
        }
        w.generating = true;
        w.pending_tag = w.installed_version;
        w.pending_gen_start = self.now;
        let base = 1.0 / self.cfg.workers[idx].mu_rollouts_per_s;
        let duration = match &self.jitter {
            Some(dist) => base * dist.sample(&mut w.rng),
            None => base,
        };
        self.schedule(
            self.now + duration,
            PRIORITY_ROLLOUT,
            EventKind::RolloutDelivered { worker: idx },
        );
    }

    fn on_rollout_delivered(&mut self, idx: usize) {
        let version_tag = self.workers[idx].pending_tag;
        self.workers[idx].generating = false;
        self.workers[idx].generated_total += 1;
        self.workers[idx].delivered_since_tick += 1;
        let record = TrajectoryRecord {
            prompt_id: format!("w{idx}-{}", self.workers[idx].generated_total),
            response_payload: Vec::new(),
            reward: 0.0,
            version: version_tag,
            metadata: Metadata::default(),
        };
        let outcome = self.buffer.push_at(
            record,
            self.learner_version,
            self.cfg.planner.staleness_budget,
            self.now,
        );
        let ev = TraceEvent {
            worker: Some(idx as u32),
            version: Some(version_tag),
            learner_version: Some(self.learner_version),
            count: Some(1),
            value: Some(if outcome.is_accepted() { 1.0 } else { 0.0 }),
            ..self.blank()
        };
        self.trace(TraceKind::RolloutDelivered, ev);
        // back-to-back generation under the currently installed snapshot
        self.start_generation(idx);
        if !self.busy {
            self.try_start_step();
        }
    }

    fn try_start_step(&mut self) {
        if self.busy || self.steps_done >= self.cfg.total_steps {
            return;
        }
        let s = self.cfg.planner.staleness_budget;
        let evicted = self
            .buffer
            .evict_stale(self.learner_version, s);
        if evicted > 0 {
            let ev = TraceEvent {
                learner_version: Some(self.learner_version),
                count: Some(evicted as u64),
                ..self.blank()
            };
            self.trace(TraceKind::Evict, ev);
        }
        let r = self.cfg.planner.rollouts_per_step as usize;
        if !self.buffer.can_form_batch(r) {
            if self.idle_since.is_none() {
                self.idle_since = Some(self.now);
                let ev = TraceEvent {
                    learner_version: Some(self.learner_version),
                    ..self.blank()
                };
                self.trace(TraceKind::IdleStart, ev);
            }
            return;
        }
        if let Some(started) = self.idle_since.take() {
            let ev = TraceEvent {
                learner_version: Some(self.learner_version),
                value: Some(self.now - started),
                ..self.blank()
            };
            self.trace(TraceKind::IdleEnd, ev);
        }
        let batch = self
            .buffer
            .sample_batch(r, self.learner_version, s)
            .expect("can_form_batch checked");
        let min_version = batch.iter().map(|rec| rec.version).min().unwrap_or(0);
        let staleness = self.learner_version - min_version;
        let ev = TraceEvent {
            version: Some(min_version),
            learner_version: Some(self.learner_version),
            count: Some(batch.len() as u64),
            value: Some(staleness as f64),
            ..self.blank()
        };
        self.trace(TraceKind::BatchSampled, ev);
        let ev = TraceEvent {
            learner_version: Some(self.learner_version),
            ..self.blank()
        };
        self.trace(TraceKind::StepStart, ev);
        self.busy = true;
        self.schedule(
            self.now + self.cfg.planner.t_train_s,
            PRIORITY_STEP,
            EventKind::StepEnd,
        );
    }

    fn on_step_end(&mut self) {
        let ev = TraceEvent {
            learner_version: Some(self.learner_version),
            ..self.blank()
        };
        self.trace(TraceKind::StepEnd, ev);
        self.busy = false;
        self.learner_version += 1;
        self.steps_done += 1;
        if self.steps_done >= self.cfg.total_steps {
            return;
        }
        if self.learner_version % self.cfg.planner.kappa as u64 == 0 {
            self.publish();
            self.control_tick();
        }
        self.try_start_step();
    }

    fn publish(&mut self) {
        let version = self.learner_version;
        let ev = TraceEvent {
            version: Some(version),
            learner_version: Some(version),
            ..self.blank()
        };
        self.trace(TraceKind::Publish, ev);

        let active_specs: Vec<_> = self
            .cfg
            .workers
            .iter()
            .enumerate()
            .filter(|(i, _)| self.workers[*i].active)
            .map(|(_, w)| w.clone())
            .collect();
        if active_specs.is_empty() {
            return;
        }
        let snapshot = PolicySnapshot::new(version, self.cfg.snapshot_bytes);
        let plan = plan_broadcast(
            self.cfg.broadcast_strategy,
            &active_specs,
            &self.cfg.net,
            &snapshot,
        )
        .expect("plan over non-empty active set");

        if self.cfg.worst_case {
            // everyone switches only when the whole fleet has installed
            let outcome = simulate_dissemination(&plan, &self.cfg.net, &snapshot, 1.0);
            let fleet_time = outcome
                .per_worker_install_time_s
                .values()
                .fold(0.0f64, |a, &b| a.max(b));
            self.schedule(
                self.now + fleet_time,
                PRIORITY_INSTALL,
                EventKind::FleetInstall { version },
            );
            return;
        }

        // chunk-level store-and-forward relay through the event loop
        let bw = self.cfg.net.worker_link_bytes_per_s;
        let lat = self.cfg.net.latency_per_hop_s;
        let learner_rate = match plan.strategy {
            BroadcastStrategy::StarUnlimited => bw,
            BroadcastStrategy::StarLimited => {
                let b0 = self
                    .cfg
                    .net
                    .learner_uplink_bytes_per_s
                    .expect("validated: star-limited needs finite uplink");
                (b0 / active_specs.len() as f64).min(bw)
            }
            BroadcastStrategy::TreePipelined => bw,
        };
        for stripe in &plan.stripes {
            let chunk_count = RelayState::chunk_count(stripe.len, self.cfg.net.chunk_bytes);
            for (pos, id) in stripe.chain.iter().enumerate() {
                let idx = self.worker_index(id);
                let child = stripe.chain.get(pos + 1).cloned();
                self.workers[idx].relay = Some(RelayState::new(
                    id,
                    version,
                    stripe.stripe_index,
                    chunk_count,
                    child,
                ));
                self.workers[idx].outbound_free_at = 0.0;
            }
            // the learner streams the stripe to the chain head
            let head = self.worker_index(&stripe.chain[0]);
            let mut sent = 0u64;
            let mut finish = self.now;
            for k in 0..chunk_count {
                let len = (stripe.len - sent).min(self.cfg.net.chunk_bytes);
                sent += len;
                finish += len as f64 / learner_rate;
                self.schedule(
                    finish + lat,
                    PRIORITY_INSTALL,
                    EventKind::ChunkArrival {
                        worker: head,
                        chunk: Chunk {
                            snapshot_version: version,
                            stripe_index: stripe.stripe_index,
                            chunk_index: k,
                            len_bytes: len,
                        },
                    },
                );
            }
        }
    }

    fn on_chunk_arrival(&mut self, idx: usize, chunk: Chunk) {
        match &self.workers[idx].relay {
            Some(r) if r.version() == chunk.snapshot_version => {}
            _ => return, // dissemination superseded or never planned
        }
        let actions = {
            let relay = self.workers[idx].relay.as_mut().expect("checked above");
            match relay.forward_on_receipt(chunk) {
                Ok(actions) => actions,
                Err(_) => {
                    debug_assert!(false, "engine-built plans never misroute chunks");
                    return;
                }
            }
        };
        for action in actions {
            match action {
                RelayAction::Forward { to, chunk } => {
                    let child = self.worker_index(&to);
                    let bw = self.cfg.net.worker_link_bytes_per_s;
                    let lat = self.cfg.net.latency_per_hop_s;
                    let send_start = self.now.max(self.workers[idx].outbound_free_at);
                    let send_end = send_start + chunk.len_bytes as f64 / bw;
                    self.workers[idx].outbound_free_at = send_end;
                    let ev = TraceEvent {
                        worker: Some(idx as u32),
                        peer: Some(child as u32),
                        version: Some(chunk.snapshot_version),
                        count: Some(chunk.chunk_index as u64),
                        ..self.blank()
                    };
                    self.trace(TraceKind::ChunkForward, ev);
                    self.schedule(
                        send_end + lat,
                        PRIORITY_INSTALL,
                        EventKind::ChunkArrival {
                            worker: child,
                            chunk,
                        },
                    );
                }
                RelayAction::InstallComplete { version } => {
                    self.install(idx, version);
                }
            }
        }
    }

    fn install(&mut self, idx: usize, version: u64) {
        if version <= self.workers[idx].installed_version {
            return;
        }
        self.workers[idx].installed_version = version;
        // a generation starting at this exact instant runs under the new
        // version: installs precede rollout events within one timestamp
        if self.workers[idx].generating && self.workers[idx].pending_gen_start == self.now {
            self.workers[idx].pending_tag = version;
        }
        let ev = TraceEvent {
            worker: Some(idx as u32),
            version: Some(version),
            ..self.blank()
        };
        self.trace(TraceKind::Install, ev);
    }

    fn on_fleet_install(&mut self, version: u64) {
        for idx in 0..self.workers.len() {
            if self.workers[idx].active {
                self.install(idx, version);
            }
        }
    }

    fn control_tick(&mut self) {
        let Some(scheduler) = self.scheduler.as_mut() else {
            return;
        };
        let dt = self.now - self.last_tick_time;
        if dt > 0.0 {
            for (idx, w) in self.workers.iter_mut().enumerate() {
                if w.active {
                    let rate = w.delivered_since_tick as f64 / dt;
                    let id = self.cfg.workers[idx].id.clone();
                    let _ = scheduler.record_delivery_rate(&id, rate);
                }
                w.delivered_since_tick = 0;
            }
        }
        self.last_tick_time = self.now;
        let Some(mu_target) = compute_mu_min(&self.cfg.planner).mu_target else {
            return;
        };
        let actions = scheduler.control_step(mu_target, self.now);
        for action in actions {
            match action {
                ControlAction::Activate(id) => {
                    let idx = self.worker_index(&id);
                    self.activate_worker(idx);
                }
                ControlAction::Release(id) => {
                    let idx = self.worker_index(&id);
                    self.release_worker(idx);
                }
            }
        }
    }

    fn run_loop(&mut self) {
        // initial activation: greedy provisioning against the capacity
        // target, or the whole fleet when provisioning is disabled
        let initial: Vec<usize> = if self.cfg.enable_provisioning {
            let target = compute_mu_min(&self.cfg.planner)
                .mu_target
                .unwrap_or(f64::INFINITY);
            let result = greedy_provision(&self.cfg.workers, target);
            let ids = result.selected;
            if let Some(s) = self.scheduler.as_mut() {
                s.activate_initial(&ids);
            }
            ids.iter().map(|id| self.worker_index(id)).collect()
        } else {
            (0..self.cfg.workers.len()).collect()
        };
        for idx in initial {
            self.activate_worker(idx);
        }
        self.try_start_step();

        while self.steps_done < self.cfg.total_steps {
            let Some(event) = self.heap.pop() else {
                break;
            };
            debug_assert!(event.time >= self.now - 1e-12);
            self.now = event.time;
            match event.kind {
                EventKind::ChunkArrival { worker, chunk } => self.on_chunk_arrival(worker, chunk),
                EventKind::FleetInstall { version } => self.on_fleet_install(version),
                EventKind::RolloutDelivered { worker } => self.on_rollout_delivered(worker),
                EventKind::StepEnd => self.on_step_end(),
            }
        }
        // close a trailing idle interval at run end
        if let Some(started) = self.idle_since.take() {
            let ev = TraceEvent {
                learner_version: Some(self.learner_version),
                value: Some(self.now - started),
                ..self.blank()
            };
            self.trace(TraceKind::IdleEnd, ev);
        }
    }
}

/// Execute one simulation and derive its report from the trace.
pub fn run(config: &SimConfig) -> Result<(SimTrace, RunReport), SimError> {
    let mut engine = Engine::new(config)?;
    engine.run_loop();
    let trace = SimTrace {
        meta: TraceMeta {
            schema_version: 1,
            rng_seed: config.rng_seed,
            total_steps: config.total_steps,
            t_train_s: config.planner.t_train_s,
            kappa: config.planner.kappa,
            staleness_budget: config.planner.staleness_budget,
            rollouts_per_step: config.planner.rollouts_per_step,
            q_fraction: config.q_fraction(),
            learner_cost_per_hour: config.learner_cost_per_hour,
            worker_ids: config.workers.iter().map(|w| w.id.clone()).collect(),
        },
        events: engine.events,
    };
    let report = super::report::compute_report(&trace)?;
    Ok((trace, report))
}
