//! Metric aggregation over an event trace.
//!
//! Everything in the report is recomputed from the log: idle intervals give
//! the bubble ratio, batch events give the staleness trace, publish/install
//! pairs give the observed broadcast latency, and activate/release pairs
//! give worker dollar cost. The aggregation rejects structurally broken
//! traces instead of guessing.

use std::collections::BTreeMap;

use crate::planner::ceil_rel;

use super::{RunReport, SimError, SimTrace, TraceKind};

pub fn compute_report(trace: &SimTrace) -> Result<RunReport, SimError> {
    let meta = &trace.meta;
    let mut last_time = 0.0f64;
    let mut idle_open: Option<f64> = None;
    let mut idle_intervals: Vec<(f64, f64)> = Vec::new();
    let mut first_step_time: Option<f64> = None;
    let mut staleness = Vec::new();
    let mut steps_completed = 0u32;
    let mut publishes: BTreeMap<u64, f64> = BTreeMap::new();
    let mut installs: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut active_at_publish: BTreeMap<u64, usize> = BTreeMap::new();
    let mut active_count = 0usize;
    let mut worker_active_since: BTreeMap<u32, (f64, f64)> = BTreeMap::new(); // idx -> (since, rate)
    let mut worker_cost = 0.0f64;
    let mut generated = 0u64;
    let mut consumed = 0u64;
    let mut evicted = 0u64;
    let mut step_open = false;

    for e in &trace.events {
        if e.time_s < last_time - 1e-12 {
            return Err(SimError::MalformedTrace(format!(
                "event times decrease at {} ({:?})",
                e.time_s, e.kind
            )));
        }
        last_time = last_time.max(e.time_s);
        match e.kind {
            TraceKind::IdleStart => {
                if idle_open.is_some() {
                    return Err(SimError::MalformedTrace("nested idle_start".into()));
                }
                idle_open = Some(e.time_s);
            }
            TraceKind::IdleEnd => {
                let Some(start) = idle_open.take() else {
                    return Err(SimError::MalformedTrace("idle_end without idle_start".into()));
                };
                idle_intervals.push((start, e.time_s));
            }
            TraceKind::StepStart => {
                if step_open {
                    return Err(SimError::MalformedTrace("step_start while a step runs".into()));
                }
                step_open = true;
                first_step_time.get_or_insert(e.time_s);
            }
            TraceKind::StepEnd => {
                if !step_open {
                    return Err(SimError::MalformedTrace("step_end without step_start".into()));
                }
                step_open = false;
                steps_completed += 1;
            }
            TraceKind::BatchSampled => {
                let (Some(lv), Some(min_v), Some(n)) = (e.learner_version, e.version, e.count)
                else {
                    return Err(SimError::MalformedTrace("batch_sampled missing fields".into()));
                };
                if min_v > lv {
                    return Err(SimError::MalformedTrace(
                        "batch version exceeds learner version".into(),
                    ));
                }
                staleness.push((lv - min_v) as u32);
                consumed += n;
            }
            TraceKind::Publish => {
                let Some(v) = e.version else {
                    return Err(SimError::MalformedTrace("publish missing version".into()));
                };
                publishes.insert(v, e.time_s);
                active_at_publish.insert(v, active_count);
            }
            TraceKind::Install => {
                let Some(v) = e.version else {
                    return Err(SimError::MalformedTrace("install missing version".into()));
                };
                installs.entry(v).or_default().push(e.time_s);
            }
            TraceKind::RolloutDelivered => {
                generated += 1;
            }
            TraceKind::Evict => {
                evicted += e.count.unwrap_or(0);
            }
            TraceKind::Activate => {
                let (Some(w), Some(rate)) = (e.worker, e.value) else {
                    return Err(SimError::MalformedTrace("activate missing fields".into()));
                };
                if worker_active_since.insert(w, (e.time_s, rate)).is_some() {
                    return Err(SimError::MalformedTrace(format!(
                        "worker {w} activated twice"
                    )));
                }
                active_count += 1;
            }
            TraceKind::Release => {
                let Some(w) = e.worker else {
                    return Err(SimError::MalformedTrace("release missing worker".into()));
                };
                let Some((since, rate)) = worker_active_since.remove(&w) else {
                    return Err(SimError::MalformedTrace(format!(
                        "worker {w} released while inactive"
                    )));
                };
                worker_cost += rate * (e.time_s - since) / 3600.0;
                active_count -= 1;
            }
            TraceKind::ChunkForward => {}
        }
    }

    let final_time_s = last_time;
    if let Some(start) = idle_open {
        idle_intervals.push((start, final_time_s));
    }
    for (_, (since, rate)) in worker_active_since {
        worker_cost += rate * (final_time_s - since) / 3600.0;
    }

    // Bubbles are stalls of a running learner; the initial buffer fill
    // before the first step is warm-up, not idle time.
    let idle_total: f64 = match first_step_time {
        Some(t0) => idle_intervals
            .iter()
            .filter(|(start, _)| *start >= t0)
            .map(|(start, end)| end - start)
            .sum(),
        None => 0.0,
    };

    let train_time_s = steps_completed as f64 * meta.t_train_s;
    let bubble_ratio = if train_time_s == 0.0 {
        1.0
    } else {
        idle_total / (idle_total + train_time_s)
    };

    // per publication, the fraction-q completion latency; keep the worst
    let mut t_bcast_observed: Option<f64> = None;
    for (version, t_pub) in &publishes {
        let fleet = active_at_publish.get(version).copied().unwrap_or(0);
        if fleet == 0 {
            continue;
        }
        let k = (ceil_rel(meta.q_fraction * fleet as f64) as usize).max(1);
        let Some(times) = installs.get(version) else {
            continue;
        };
        if times.len() < k {
            continue; // dissemination still incomplete at run end
        }
        let mut sorted = times.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let t = sorted[k - 1] - t_pub;
        t_bcast_observed = Some(t_bcast_observed.map_or(t, |cur: f64| cur.max(t)));
    }

    let learner_cost = meta.learner_cost_per_hour * final_time_s / 3600.0;

    Ok(RunReport {
        bubble_ratio,
        delta_max: staleness.iter().copied().max().unwrap_or(0),
        staleness_series: staleness,
        t_bcast_observed_s: t_bcast_observed,
        total_cost: worker_cost + learner_cost,
        rollouts_generated: generated,
        rollouts_consumed: consumed,
        rollouts_evicted: evicted,
        steps_completed,
        idle_time_s: idle_total,
        train_time_s,
        final_time_s,
    })
}
