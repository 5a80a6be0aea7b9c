//! Canonical version-tagged trajectory record exchanged between planes.
//!
//! A record is the tuple (prompt, response, reward, version, metadata):
//! the replay buffer indexes it by `version`, the learner consumes it, and
//! task adapters fill `metadata` with masks and normalized advantages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SchemaViolation {
    #[error("reward is not finite")]
    NonFiniteReward,
    #[error("response mask length {mask} does not match token count {tokens}")]
    ResponseMaskMismatch { mask: usize, tokens: usize },
    #[error("loss mask length {mask} does not match shifted token count {expected}")]
    LossMaskMismatch { mask: usize, expected: usize },
    #[error("sampler logprob length {got} does not match loss mask length {expected}")]
    SamplerLogprobMismatch { got: usize, expected: usize },
    #[error("advantage is not finite")]
    NonFiniteAdvantage,
}

/// Task metadata carried alongside a trajectory.
///
/// All per-token arrays are optional (empty means absent); when present
/// they must align with the response token count: the response mask covers
/// every token, the loss mask and sampler log-probs cover the next-token
/// shifted positions (one fewer).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub response_mask: Vec<u8>,
    pub loss_mask: Vec<u8>,
    pub group_tag: String,
    pub sampler_token_logprobs: Vec<f64>,
    /// Normalized advantage, filled after group-wise normalization.
    pub advantage: Option<f64>,
}

/// Canonical record: prompt id, response tokens, scalar reward, snapshot
/// version that generated the response, and task metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub prompt_id: String,
    pub response_payload: Vec<u32>,
    pub reward: f64,
    pub version: u64,
    pub metadata: Metadata,
}

impl TrajectoryRecord {
    /// Format-integrity check applied at buffer admission.
    pub fn validate(&self) -> Result<(), SchemaViolation> {
        if !self.reward.is_finite() {
            return Err(SchemaViolation::NonFiniteReward);
        }
        let tokens = self.response_payload.len();
        let meta = &self.metadata;
        if !meta.response_mask.is_empty() && meta.response_mask.len() != tokens {
            return Err(SchemaViolation::ResponseMaskMismatch {
                mask: meta.response_mask.len(),
                tokens,
            });
        }
        if !meta.loss_mask.is_empty() && meta.loss_mask.len() + 1 != tokens {
            return Err(SchemaViolation::LossMaskMismatch {
                mask: meta.loss_mask.len(),
                expected: tokens.saturating_sub(1),
            });
        }
        if !meta.sampler_token_logprobs.is_empty()
            && meta.sampler_token_logprobs.len() != tokens.saturating_sub(1)
        {
            return Err(SchemaViolation::SamplerLogprobMismatch {
                got: meta.sampler_token_logprobs.len(),
                expected: tokens.saturating_sub(1),
            });
        }
        if let Some(adv) = meta.advantage {
            if !adv.is_finite() {
                return Err(SchemaViolation::NonFiniteAdvantage);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> TrajectoryRecord {
        TrajectoryRecord {
            prompt_id: "p0".into(),
            response_payload: vec![1, 5, 6, 7],
            reward: 1.5,
            version: 3,
            metadata: Metadata::default(),
        }
    }

    #[test]
    fn bare_record_is_valid() {
        assert!(record().validate().is_ok());
    }

    #[test]
    fn nan_reward_is_malformed() {
        let mut r = record();
        r.reward = f64::NAN;
        assert_eq!(r.validate(), Err(SchemaViolation::NonFiniteReward));
    }

    #[test]
    fn mask_alignment_enforced() {
        let mut r = record();
        r.metadata.response_mask = vec![0, 1, 1]; // 3 != 4 tokens
        assert!(matches!(
            r.validate(),
            Err(SchemaViolation::ResponseMaskMismatch { .. })
        ));
        let mut r = record();
        r.metadata.response_mask = vec![0, 0, 1, 1];
        r.metadata.loss_mask = vec![0, 0, 1];
        r.metadata.sampler_token_logprobs = vec![-0.1, -0.2, -0.3];
        assert!(r.validate().is_ok());
        r.metadata.sampler_token_logprobs.pop();
        assert!(matches!(
            r.validate(),
            Err(SchemaViolation::SamplerLogprobMismatch { .. })
        ));
    }
}
