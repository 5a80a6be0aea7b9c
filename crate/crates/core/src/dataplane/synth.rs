//! Deterministic synthetic episode logs.
//!
//! Stands in for a live sandbox when exercising the adapter pipeline:
//! seeded generation of multi-turn logs with controllable group tags and
//! chip-style reward distributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::messages::{EpisodeLog, Turn};

/// Generate `n` episode logs. Turn counts are drawn uniformly from
/// `turns_range` (inclusive), states and actions are composed from `vocab`,
/// rewards are integer chip deltas in [-25, 25], and group tags cycle
/// through `group_count` buckets.
pub fn synth_episodes(
    seed: u64,
    n: usize,
    turns_range: (usize, usize),
    vocab: &[&str],
    group_count: usize,
) -> Vec<EpisodeLog> {
    assert!(turns_range.0 >= 1 && turns_range.0 <= turns_range.1);
    assert!(!vocab.is_empty());
    assert!(group_count >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(n);
    for i in 0..n {
        let turns_n = rng.gen_range(turns_range.0..=turns_range.1);
        let mut turns = Vec::with_capacity(turns_n);
        for t in 0..turns_n {
            let w1 = vocab[rng.gen_range(0..vocab.len())];
            let w2 = vocab[rng.gen_range(0..vocab.len())];
            let w3 = vocab[rng.gen_range(0..vocab.len())];
            let pot = rng.gen_range(10..500);
            turns.push(Turn {
                state: format!("hand {w1} {w2} pot {pot} round {t}"),
                action: format!("act {w3} {}", rng.gen_range(0..100)),
                reward: rng.gen_range(-25..=25) as f64,
            });
        }
        episodes.push(EpisodeLog {
            episode_id: format!("ep{i:04}"),
            turns,
            group_tag: format!("g{}", i % group_count),
        });
    }
    episodes
}
