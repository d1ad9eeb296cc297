//! Conversation schema, turn unfolding, preference-pair and ranked-set
//! construction, JSONL serialization and dataset statistics.

mod build;
mod jsonl;
mod stats;
mod unfold;

pub use build::{
    build_pair_dataset, build_ranked_set, filter_min_rating, ranked_prompts, split_of, PairBuildConfig,
    PairBuildReport, RankedBuildConfig,
};
pub use jsonl::{parse_jsonl_line, read_jsonl, to_jsonl_line, write_jsonl, JsonlError, JsonlRecord, SCHEMA_VERSION};
pub use stats::{pair_stats, turns_histogram, PairStats};
pub use unfold::{sft_examples, split_blocks, unfold, unfold_all};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::derive_seed;
use crate::taskgen::Rating;
use crate::taskgen::TaskInstance;
use crate::vocab::{self, Token};

#[derive(Debug, Error, PartialEq)]
pub enum ConversationError {
    #[error("conversation {id}: {detail}")]
    Invalid { id: u64, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn marker(self) -> Token {
        match self {
            Role::System => vocab::SYSTEM,
            Role::User => vocab::USER,
            Role::Assistant => vocab::ASSISTANT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub tokens: Vec<Token>,
}

impl Message {
    /// Serialized form: role marker, body, and for assistant messages a
    /// closing end-of-sequence token.
    pub fn serialize_into(&self, out: &mut Vec<Token>) {
        out.push(self.role.marker());
        out.extend_from_slice(&self.tokens);
        if self.role == Role::Assistant {
            out.push(vocab::EOS);
        }
    }

    pub fn serialized_len(&self) -> usize {
        self.tokens.len() + 1 + usize::from(self.role == Role::Assistant)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: u64,
    pub messages: Vec<Message>,
}

impl Conversation {
    /// Roles must alternate user/assistant after an optional leading system
    /// message, starting with user and containing at least one assistant turn.
    pub fn validate(&self) -> Result<(), ConversationError> {
        let err = |detail: String| ConversationError::Invalid { id: self.id, detail };
        let body = match self.messages.first() {
            Some(m) if m.role == Role::System => &self.messages[1..],
            _ => &self.messages[..],
        };
        if !body.iter().any(|m| m.role == Role::Assistant) {
            return Err(err("no assistant message".into()));
        }
        for (i, m) in body.iter().enumerate() {
            let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != want {
                return Err(err(format!("message {i} is {:?}, expected {want:?}", m.role)));
            }
        }
        Ok(())
    }

    pub fn system(&self) -> Option<&Message> {
        self.messages.first().filter(|m| m.role == Role::System)
    }

    /// Complete (user, assistant) turns in order.
    pub fn turns(&self) -> Vec<(&Message, &Message)> {
        let body = if self.system().is_some() { &self.messages[1..] } else { &self.messages[..] };
        body.chunks_exact(2).map(|c| (&c[0], &c[1])).collect()
    }

    pub fn num_turns(&self) -> usize {
        self.turns().len()
    }
}

/// One training or generation prompt: serialized history plus the final
/// user query, and the reference response for the final turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub conversation_id: u64,
    /// Index of the final turn within the conversation.
    pub turn_index: usize,
    /// Number of turns in the context including the final one (1-based,
    /// counted within the block the instance came from).
    pub depth: usize,
    /// History and final query, ending with the assistant marker.
    pub context: Vec<Token>,
    /// Reference response for the final turn, ending with end-of-sequence.
    pub response: Vec<Token>,
    /// Half-open spans over `context ++ response` where loss applies.
    pub mask_spans: Vec<(usize, usize)>,
    pub task: TaskInstance,
}

impl PromptInstance {
    pub fn prompt_id(&self) -> u64 {
        derive_seed(&[self.conversation_id, self.turn_index as u64])
    }

    /// `context ++ response` together with the per-position loss mask.
    pub fn sequence(&self) -> (Vec<Token>, Vec<bool>) {
        let mut seq = self.context.clone();
        seq.extend_from_slice(&self.response);
        (seq.clone(), spans_to_mask(&self.mask_spans, seq.len()))
    }

    /// Same prompt with a different final response; the loss covers only
    /// that response.
    pub fn with_response(&self, response: Vec<Token>) -> PromptInstance {
        let start = self.context.len();
        PromptInstance { mask_spans: vec![(start, start + response.len())], response, ..self.clone() }
    }
}

pub fn spans_to_mask(spans: &[(usize, usize)], len: usize) -> Vec<bool> {
    let mut mask = vec![false; len];
    for &(a, b) in spans {
        for m in &mut mask[a.min(len)..b.min(len)] {
            *m = true;
        }
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Annotated comparison of two sampled responses to one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: PromptInstance,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    pub rating: Rating,
    /// `oracle_reward(chosen) − oracle_reward(rejected)`.
    pub margin: f64,
    pub split: Split,
    /// Oracle explanation of the judgement.
    pub reason: String,
}

/// Candidate pool for one prompt sorted by reward-model score, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedRecord {
    pub prompt: PromptInstance,
    pub responses: Vec<ScoredResponse>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub tokens: Vec<Token>,
    pub score: f32,
    /// Position in the generated pool.
    pub pool_index: usize,
}

impl RankedRecord {
    /// Response at 1-based `rank`.
    pub fn at_rank(&self, rank: usize) -> Option<&ScoredResponse> {
        rank.checked_sub(1).and_then(|i| self.responses.get(i))
    }

    pub fn is_sorted(&self) -> bool {
        self.responses.windows(2).all(|w| w[0].score >= w[1].score)
    }

    /// The record as if only the first `n` pool candidates had been drawn.
    pub fn pool_prefix(&self, n: usize) -> RankedRecord {
        let responses = self.responses.iter().filter(|r| r.pool_index < n).cloned().collect();
        RankedRecord { prompt: self.prompt.clone(), responses }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let u = Message { role: Role::User, tokens: vec![vocab::TASK_COPY, vocab::symbol(0)] };
        let a = Message { role: Role::Assistant, tokens: vec![vocab::symbol(0)] };
        let s = Message { role: Role::System, tokens: vec![] };
        let ok = Conversation { id: 1, messages: vec![s.clone(), u.clone(), a.clone()] };
        assert!(ok.validate().is_ok());
        assert_eq!(ok.num_turns(), 1);
        let no_asst = Conversation { id: 2, messages: vec![u.clone()] };
        assert!(no_asst.validate().is_err());
        let wrong = Conversation { id: 3, messages: vec![a.clone(), u.clone()] };
        assert!(wrong.validate().is_err());
    }

    #[test]
    fn mask_from_spans() {
        assert_eq!(spans_to_mask(&[(1, 3), (4, 5)], 6), vec![false, true, true, false, true, false]);
    }
}
