//! Task-adapter layer: log standardization, turn-aware masking, outcome
//! returns, group-wise advantage normalization, and the clipped surrogate
//! objective over toy categorical policies.
//!
//! The adapter's output is the canonical version-tagged record consumed by
//! the replay buffer; everything here is a pure kernel with no shared
//! mutable state, safe for data-parallel batch evaluation.

mod grpo;
mod masks;
mod messages;
mod synth;

pub use grpo::{grpo_loss, token_ratio, GrpoConfig, GrpoEpisode, GrpoOutput, Grouping, TokenDiag};
pub use masks::{
    broadcast_advantage, compute_masks, left_pad, normalize_group, toy_tokenize, MaskSet,
    TokenizedEpisode,
};
pub use messages::{
    episode_return, standardize, EpisodeLog, Message, MessageSequence, Role, Turn, ANSWER_FORMAT,
};
pub use synth::synth_episodes;

use thiserror::Error;

use crate::record::{Metadata, TrajectoryRecord};

#[derive(Debug, Error, PartialEq)]
pub enum DataplaneError {
    #[error("episode {0} has no turns")]
    EmptyEpisode(String),
    #[error("episode {0} has a non-finite reward")]
    NonFiniteReward(String),
    #[error("bad message layout: {0}")]
    BadMessageLayout(String),
    #[error("no turn-start tokens in episode")]
    NoTurnStarts,
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("numeric error: {0}")]
    NumericError(String),
    #[error("episode has an all-zero loss mask")]
    DegenerateEpisode,
    #[error("bad config: {0}")]
    BadConfig(String),
}

/// Assemble the canonical version-tagged record from adapter outputs.
pub fn to_canonical(
    prompt_id: &str,
    tokens: &TokenizedEpisode,
    masks: &MaskSet,
    episode_return: f64,
    version: u64,
    group_tag: &str,
    sampler_token_logprobs: Vec<f64>,
) -> Result<TrajectoryRecord, DataplaneError> {
    let len = tokens.token_ids.len();
    if masks.response_mask.len() != len {
        return Err(DataplaneError::LengthMismatch {
            what: "response_mask",
            got: masks.response_mask.len(),
            expected: len,
        });
    }
    if masks.loss_mask.len() + 1 != len {
        return Err(DataplaneError::LengthMismatch {
            what: "loss_mask",
            got: masks.loss_mask.len(),
            expected: len.saturating_sub(1),
        });
    }
    if !sampler_token_logprobs.is_empty() && sampler_token_logprobs.len() + 1 != len {
        return Err(DataplaneError::LengthMismatch {
            what: "sampler_token_logprobs",
            got: sampler_token_logprobs.len(),
            expected: len.saturating_sub(1),
        });
    }
    Ok(TrajectoryRecord {
        prompt_id: prompt_id.to_string(),
        response_payload: tokens.token_ids.clone(),
        reward: episode_return,
        version,
        metadata: Metadata {
            response_mask: masks.response_mask.clone(),
            loss_mask: masks.loss_mask.clone(),
            group_tag: group_tag.to_string(),
            sampler_token_logprobs,
            advantage: None,
        },
    })
}
