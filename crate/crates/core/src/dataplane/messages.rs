//! Episode logs and their standardization into chat-formatted messages.
//!
//! Raw episode logs are flattened into a system-prompt-first message list:
//! each turn contributes its state to the current user message (opening a
//! new one when the previous message was an assistant reply) followed by
//! one assistant message carrying the action. Reward bookkeeping messages
//! are optional user messages inserted after assistant turns; training
//! signals always come from the numeric rewards, never from these strings.

use serde::{Deserialize, Serialize};

use super::DataplaneError;

/// Format instruction appended to every state prompt.
pub const ANSWER_FORMAT: &str = "<answer> ... </answer>";

/// One environment turn: serialized state, rendered action, chip delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub state: String,
    pub action: String,
    pub reward: f64,
}

/// Raw interaction log for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode_id: String,
    pub turns: Vec<Turn>,
    pub group_tag: String,
}

impl EpisodeLog {
    pub fn validate(&self) -> Result<(), DataplaneError> {
        if self.turns.is_empty() {
            return Err(DataplaneError::EmptyEpisode(self.episode_id.clone()));
        }
        if self.turns.iter().any(|t| !t.reward.is_finite()) {
            return Err(DataplaneError::NonFiniteReward(self.episode_id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// Chat-formatted message list: system first, then alternating
/// user/assistant (reward bookkeeping messages preserve the alternation by
/// extending or standing in for user messages).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageSequence {
    pub messages: Vec<Message>,
}

impl MessageSequence {
    /// Check the structural invariant: system first, strict user/assistant
    /// alternation afterwards.
    pub fn validate_alternation(&self) -> Result<(), DataplaneError> {
        let msgs = &self.messages;
        if msgs.is_empty() || msgs[0].role != Role::System {
            return Err(DataplaneError::BadMessageLayout(
                "first message must be system".into(),
            ));
        }
        for (i, pair) in msgs[1..].windows(2).enumerate() {
            let ok = matches!(
                (pair[0].role, pair[1].role),
                (Role::User, Role::Assistant) | (Role::Assistant, Role::User)
            );
            if !ok {
                return Err(DataplaneError::BadMessageLayout(format!(
                    "roles must alternate user/assistant after the system prompt (position {})",
                    i + 1
                )));
            }
        }
        if msgs.len() > 1 && msgs[1].role != Role::User {
            return Err(DataplaneError::BadMessageLayout(
                "second message must be user".into(),
            ));
        }
        Ok(())
    }
}

/// Convert a raw episode log into canonical chat messages.
pub fn standardize(
    log: &EpisodeLog,
    system_prompt: &str,
    include_reward_messages: bool,
) -> Result<MessageSequence, DataplaneError> {
    log.validate()?;
    let mut messages = vec![
        Message {
            role: Role::System,
            content: system_prompt.to_string(),
        },
        Message {
            role: Role::User,
            content: String::new(),
        },
    ];
    for (idx, turn) in log.turns.iter().enumerate() {
        if messages.last().map(|m| m.role) != Some(Role::User) {
            messages.push(Message {
                role: Role::User,
                content: String::new(),
            });
        }
        let user = messages.last_mut().expect("user message present");
        user.content.push_str(&format!("\nTurn {}:\n", idx + 1));
        user.content.push_str(&format!(
            "State:\n{}\n Always output: {}\n",
            turn.state, ANSWER_FORMAT
        ));
        messages.push(Message {
            role: Role::Assistant,
            content: turn.action.clone(),
        });
        if include_reward_messages {
            messages.push(Message {
                role: Role::User,
                content: format!("Reward:\n{}\n", turn.reward),
            });
        }
    }
    let seq = MessageSequence { messages };
    seq.validate_alternation()?;
    Ok(seq)
}

/// Episode return: the sum of per-turn chip deltas.
pub fn episode_return(log: &EpisodeLog) -> f64 {
    log.turns.iter().map(|t| t.reward).sum()
}
