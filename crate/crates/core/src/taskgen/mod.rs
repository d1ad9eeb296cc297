//! Synthetic instruction-following tasks and the programmatic oracle that
//! annotates preference pairs and judges benchmark responses.

mod oracle;

pub use oracle::{
    judge_win, levenshtein, oracle_annotate, oracle_reward, OracleVerdict, Rating, Side, RATING_THRESHOLDS,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Conversation, Message, Role};
use crate::seeding::{derive_seed, rng};
use crate::vocab::{self, Token};

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("invalid turns range ({0}, {1})")]
    TurnsRange(usize, usize),
    #[error("invalid payload length range ({0}, {1})")]
    PayloadRange(usize, usize),
    #[error("conversation count must be positive")]
    Empty,
    #[error("not a task prompt: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    Dedup,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Copy, TaskKind::Reverse, TaskKind::Sort, TaskKind::Dedup];

    pub fn token(self) -> Token {
        match self {
            TaskKind::Copy => vocab::TASK_COPY,
            TaskKind::Reverse => vocab::TASK_REVERSE,
            TaskKind::Sort => vocab::TASK_SORT,
            TaskKind::Dedup => vocab::TASK_DEDUP,
        }
    }

    pub fn from_token(t: Token) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.token() == t)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::Dedup => "dedup",
        }
    }
}

/// One user request and its unique correct answer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub payload: Vec<Token>,
    pub gold: Vec<Token>,
}

impl TaskInstance {
    pub fn new(kind: TaskKind, payload: Vec<Token>) -> Self {
        let gold = solve(kind, &payload);
        Self { kind, payload, gold }
    }

    /// User-message tokens: the task marker followed by the payload.
    pub fn prompt_tokens(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.payload.len() + 1);
        out.push(self.kind.token());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Inverse of [`prompt_tokens`](Self::prompt_tokens).
    pub fn parse(user_tokens: &[Token]) -> Result<Self, TaskError> {
        let (&first, rest) = user_tokens.split_first().ok_or_else(|| TaskError::Parse("empty".into()))?;
        let kind = TaskKind::from_token(first).ok_or_else(|| TaskError::Parse(vocab::render(user_tokens)))?;
        if rest.is_empty() || !rest.iter().all(|&t| vocab::is_symbol(t)) {
            return Err(TaskError::Parse(vocab::render(user_tokens)));
        }
        Ok(Self::new(kind, rest.to_vec()))
    }
}

/// The gold answer for a task.
pub fn solve(kind: TaskKind, payload: &[Token]) -> Vec<Token> {
    match kind {
        TaskKind::Copy => payload.to_vec(),
        TaskKind::Reverse => payload.iter().rev().copied().collect(),
        TaskKind::Sort => {
            let mut v = payload.to_vec();
            v.sort_unstable();
            v
        }
        TaskKind::Dedup => {
            let mut seen = [false; 64];
            payload.iter().copied().filter(|&t| !std::mem::replace(&mut seen[t as usize % 64], true)).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGenConfig {
    pub min_payload: usize,
    pub max_payload: usize,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self { min_payload: 3, max_payload: 10 }
    }
}

pub fn random_task<R: Rng>(rng: &mut R, cfg: &TaskGenConfig) -> TaskInstance {
    let kind = TaskKind::ALL[rng.random_range(0..4)];
    let len = rng.random_range(cfg.min_payload..=cfg.max_payload);
    let payload = (0..len).map(|_| vocab::symbol(rng.random_range(0..vocab::NUM_SYMBOLS))).collect();
    TaskInstance::new(kind, payload)
}

/// Deterministic multi-turn conversations alternating a user task with its
/// gold assistant answer. Conversation `i` has id `derive_seed([seed, i])`.
pub fn gen_conversations(
    n: usize,
    turns_range: (usize, usize),
    cfg: &TaskGenConfig,
    seed: u64,
) -> Result<Vec<Conversation>, TaskError> {
    gen_conversations_from(0, n, turns_range, cfg, seed)
}

/// Conversations with indices `start..start + n` of the seeded stream.
pub fn gen_conversations_from(
    start: usize,
    n: usize,
    turns_range: (usize, usize),
    cfg: &TaskGenConfig,
    seed: u64,
) -> Result<Vec<Conversation>, TaskError> {
    let (lo, hi) = turns_range;
    if lo == 0 || lo > hi {
        return Err(TaskError::TurnsRange(lo, hi));
    }
    if cfg.min_payload == 0 || cfg.min_payload > cfg.max_payload {
        return Err(TaskError::PayloadRange(cfg.min_payload, cfg.max_payload));
    }
    if n == 0 {
        return Err(TaskError::Empty);
    }
    Ok((start..start + n).map(|i| conversation_at(i, turns_range, cfg, seed)).collect())
}

pub fn conversation_at(index: usize, turns_range: (usize, usize), cfg: &TaskGenConfig, seed: u64) -> Conversation {
    let id = derive_seed(&[seed, index as u64]);
    let mut r = rng(derive_seed(&[seed, index as u64, 1]));
    let turns = r.random_range(turns_range.0..=turns_range.1);
    let mut messages = Vec::with_capacity(turns * 2);
    for _ in 0..turns {
        let task = random_task(&mut r, cfg);
        messages.push(Message { role: Role::User, tokens: task.prompt_tokens() });
        messages.push(Message { role: Role::Assistant, tokens: task.gold.clone() });
    }
    Conversation { id, messages }
}
