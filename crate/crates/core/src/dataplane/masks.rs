//! Turn-aware masking and group-wise advantage normalization.
//!
//! A chat-turn index is assigned to every token by counting turn-start
//! tokens: `u_t = [x_t == turn_start]`, `c_t = cumsum(u)`. The response
//! mask selects tokens after the system prompt that belong to assistant
//! turns (`c > 1` and `c` odd). Under next-token prediction the loss mask
//! is the response mask dropped at the last position and the score vector
//! is shifted left by one, carrying the episode score at the final shifted
//! position only.

use serde::{Deserialize, Serialize};

use super::messages::{MessageSequence, Role};
use super::DataplaneError;

/// Token view of an episode. Padding, when present, is on the left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedEpisode {
    pub token_ids: Vec<u32>,
    /// 1 for real tokens, 0 for (left) padding.
    pub attention_mask: Vec<u8>,
    pub turn_start_token_id: u32,
}

impl TokenizedEpisode {
    pub fn validate(&self) -> Result<(), DataplaneError> {
        if self.token_ids.len() != self.attention_mask.len() {
            return Err(DataplaneError::LengthMismatch {
                what: "attention_mask",
                got: self.attention_mask.len(),
                expected: self.token_ids.len(),
            });
        }
        // left padding only: attention mask must be 0..0 1..1
        let first_real = self.attention_mask.iter().position(|&m| m == 1);
        if let Some(start) = first_real {
            if self.attention_mask[start..].iter().any(|&m| m == 0) {
                return Err(DataplaneError::BadMessageLayout(
                    "attention mask must be left padding followed by real tokens".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Response/loss masks and the shifted score vector for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    /// Per-token assistant-response indicator (length L).
    pub response_mask: Vec<u8>,
    /// Response mask restricted to shifted positions (length L-1).
    pub loss_mask: Vec<u8>,
    /// Episode score at the final shifted position, zero elsewhere
    /// (length L-1).
    pub score_vector: Vec<f64>,
}

/// Compute turn-aware masks for a tokenized episode and attach the episode
/// score to the final shifted position.
pub fn compute_masks(
    tokens: &TokenizedEpisode,
    episode_score: f64,
) -> Result<MaskSet, DataplaneError> {
    tokens.validate()?;
    let len = tokens.token_ids.len();
    if len < 2 {
        return Err(DataplaneError::NoTurnStarts);
    }
    let mut response_mask = vec![0u8; len];
    let mut turn_index = 0u32;
    let mut saw_turn_start = false;
    for (i, (&tok, &attend)) in tokens
        .token_ids
        .iter()
        .zip(tokens.attention_mask.iter())
        .enumerate()
    {
        if attend == 0 {
            continue;
        }
        if tok == tokens.turn_start_token_id {
            turn_index += 1;
            saw_turn_start = true;
        }
        if turn_index > 1 && turn_index % 2 == 1 {
            response_mask[i] = 1;
        }
    }
    if !saw_turn_start {
        return Err(DataplaneError::NoTurnStarts);
    }
    let loss_mask = response_mask[..len - 1].to_vec();
    let mut score_vector = vec![0.0; len - 1];
    score_vector[len - 2] = episode_score;
    Ok(MaskSet {
        response_mask,
        loss_mask,
        score_vector,
    })
}

/// Broadcast a scalar advantage over the response tokens.
pub fn broadcast_advantage(adv: f64, mask: &MaskSet) -> Vec<f64> {
    mask.response_mask
        .iter()
        .map(|&m| adv * m as f64)
        .collect()
}

/// Group-wise advantage normalization: within each tag group,
/// `(R - mean) / (sample_std + eps)`. The sample (n-1) standard deviation
/// is fixed here explicitly so independent implementations agree bit for
/// bit. Degenerate groups (singletons, zero variance) come out as zeros
/// through the epsilon guard.
pub fn normalize_group(
    returns: &[f64],
    group_tags: &[String],
    eps: f64,
) -> Result<Vec<f64>, DataplaneError> {
    if returns.len() != group_tags.len() {
        return Err(DataplaneError::LengthMismatch {
            what: "group_tags",
            got: group_tags.len(),
            expected: returns.len(),
        });
    }
    let mut groups: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (i, tag) in group_tags.iter().enumerate() {
        groups.entry(tag.as_str()).or_default().push(i);
    }
    let mut advantages = vec![0.0; returns.len()];
    for (_, idxs) in groups {
        let n = idxs.len() as f64;
        let mean = idxs.iter().map(|&i| returns[i]).sum::<f64>() / n;
        let std = if idxs.len() > 1 {
            let var = idxs
                .iter()
                .map(|&i| (returns[i] - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0);
            var.sqrt()
        } else {
            0.0
        };
        for &i in &idxs {
            advantages[i] = (returns[i] - mean) / (std + eps);
        }
    }
    Ok(advantages)
}

/// Toy chat-template tokenizer used in place of a real model tokenizer.
///
/// Every message is rendered as a turn-start token, a role token, then one
/// token per whitespace-separated word of content (hashed into the
/// vocabulary above the reserved range). This preserves exactly the
/// structure the masks care about: one turn-start per message, assistant
/// turns at odd chat-turn indices after the system prompt.
pub fn toy_tokenize(
    seq: &MessageSequence,
    turn_start_token_id: u32,
    vocab_size: u32,
) -> Result<TokenizedEpisode, DataplaneError> {
    const RESERVED: u32 = 8;
    if vocab_size <= RESERVED {
        return Err(DataplaneError::BadMessageLayout(format!(
            "vocab_size must exceed the reserved range {RESERVED}"
        )));
    }
    let mut ids = Vec::new();
    for msg in &seq.messages {
        ids.push(turn_start_token_id);
        let role_id = match msg.role {
            Role::System => 2,
            Role::User => 3,
            Role::Assistant => 4,
        };
        ids.push(role_id);
        for word in msg.content.split_whitespace() {
            // FNV-1a; folded into the non-reserved id range.
            let mut h: u32 = 0x811c9dc5;
            for b in word.bytes() {
                h ^= b as u32;
                h = h.wrapping_mul(0x01000193);
            }
            let id = RESERVED + h % (vocab_size - RESERVED);
            // never collide with the structural turn-start token
            let id = if id == turn_start_token_id { id + 1 } else { id };
            ids.push(id.min(vocab_size - 1));
        }
    }
    let len = ids.len();
    Ok(TokenizedEpisode {
        token_ids: ids,
        attention_mask: vec![1; len],
        turn_start_token_id,
    })
}

/// Left-pad an episode to `target_len` with `pad_token_id`.
pub fn left_pad(
    tokens: &TokenizedEpisode,
    target_len: usize,
    pad_token_id: u32,
) -> Result<TokenizedEpisode, DataplaneError> {
    let len = tokens.token_ids.len();
    if target_len < len {
        return Err(DataplaneError::LengthMismatch {
            what: "pad target",
            got: target_len,
            expected: len,
        });
    }
    if pad_token_id == tokens.turn_start_token_id {
        return Err(DataplaneError::BadMessageLayout(
            "pad token must differ from the turn-start token".into(),
        ));
    }
    let pad = target_len - len;
    let mut token_ids = vec![pad_token_id; pad];
    token_ids.extend_from_slice(&tokens.token_ids);
    let mut attention_mask = vec![0u8; pad];
    attention_mask.extend_from_slice(&tokens.attention_mask);
    Ok(TokenizedEpisode {
        token_ids,
        attention_mask,
        turn_start_token_id: tokens.turn_start_token_id,
    })
}
