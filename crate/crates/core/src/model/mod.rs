//! Decoder-only transformer used as policy and, with a scalar head, as
//! reward model; binary checkpoints.

mod checkpoint;
mod infer;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Stage, FORMAT_VERSION, MAGIC};
pub use infer::KvCache;
pub use transformer::{HeadMode, PackedBatch, Transformer, TransformerConfig};

use thiserror::Error;

use crate::numcore::{NumError, Tape, Tensor};
use crate::vocab::{Token, PAD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds context length {ctx}")]
    TooLong { len: usize, ctx: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    OutOfVocab { id: Token, vocab: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("expected a {expected:?} head, found {found:?}")]
    HeadMismatch { expected: HeadMode, found: HeadMode },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Language-model policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    pub net: Transformer,
}

/// Reward model: transformer backbone plus a linear `d_model → 1` head read
/// at the final non-padding token.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub net: Transformer,
}

impl PolicyModel {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self, ModelError> {
        Self::try_from(Transformer::new(TransformerConfig { head_mode: HeadMode::Lm, ..config }, seed)?)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.net.config
    }

    /// Next-token logits for every position, `[len, vocab]` row-major.
    pub fn forward_lm(&self, tokens: &[Token]) -> Result<Vec<f32>, ModelError> {
        let batch = self.net.pack(&[tokens])?;
        let mut tape = Tape::new();
        let logits = self.net.lm_logits(&mut tape, &batch)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// `Σ log π(response_t | prompt, response_<t)`, accumulated in f64.
    pub fn logprob_of_response(&self, prompt: &[Token], response: &[Token]) -> Result<f64, ModelError> {
        if response.is_empty() {
            return Err(ModelError::Empty("response"));
        }
        if prompt.is_empty() {
            return Err(ModelError::Empty("prompt"));
        }
        let mut seq = prompt.to_vec();
        seq.extend_from_slice(response);
        let logits = self.forward_lm(&seq)?;
        let v = self.net.config.vocab_size;
        let mut total = 0.0f64;
        for (i, &tok) in response.iter().enumerate() {
            let pos = prompt.len() + i - 1;
            total += log_softmax_f64(&logits[pos * v..(pos + 1) * v], tok as usize);
        }
        Ok(total.min(0.0))
    }
}

pub(crate) fn log_softmax_f64(row: &[f32], target: usize) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let z: f64 = row.iter().map(|&x| (x as f64 - m).exp()).sum();
    row[target] as f64 - m - z.ln()
}

impl TryFrom<Transformer> for PolicyModel {
    type Error = ModelError;
    fn try_from(net: Transformer) -> Result<Self, ModelError> {
        match net.config.head_mode {
            HeadMode::Lm => Ok(Self { net }),
            found => Err(ModelError::HeadMismatch { expected: HeadMode::Lm, found }),
        }
    }
}

impl TryFrom<Transformer> for RewardModel {
    type Error = ModelError;
    fn try_from(net: Transformer) -> Result<Self, ModelError> {
        match net.config.head_mode {
            HeadMode::Reward => Ok(Self { net }),
            found => Err(ModelError::HeadMismatch { expected: HeadMode::Reward, found }),
        }
    }
}

/// Strips trailing padding from `prompt ++ response`.
pub(crate) fn scoring_sequence(prompt: &[Token], response: &[Token]) -> Vec<Token> {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(response);
    while seq.last() == Some(&PAD) {
        seq.pop();
    }
    seq
}

/// Sequences per reward-model forward pass when scoring in bulk.
const SCORE_CHUNK: usize = 64;

impl RewardModel {
    /// Backbone copied from a policy, fresh head drawn from `N(0, 1/d_model)`.
    pub fn from_policy(policy: &PolicyModel, seed: u64) -> Result<Self, ModelError> {
        Self::try_from(policy.net.with_reward_head(seed)?)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.net.config
    }

    pub fn rm_score(&self, prompt: &[Token], response: &[Token]) -> Result<f32, ModelError> {
        Ok(self.score_batch(&[(prompt, response)])?[0])
    }

    /// Scores for many (prompt, response) pairs; order follows the input.
    pub fn score_batch(&self, items: &[(&[Token], &[Token])]) -> Result<Vec<f32>, ModelError> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(SCORE_CHUNK) {
            let seqs: Vec<Vec<Token>> = chunk.iter().map(|(p, r)| scoring_sequence(p, r)).collect();
            let refs: Vec<&[Token]> = seqs.iter().map(Vec::as_slice).collect();
            let batch = self.net.pack(&refs)?;
            let mut tape = Tape::new();
            let scores = self.net.reward_scores(&mut tape, &batch)?;
            out.extend_from_slice(tape.value(scores).data());
        }
        Ok(out)
    }

    /// Sets the scalar head weights and bias to zero.
    pub fn zero_head(&mut self) {
        for name in ["rm_head.w", "rm_head.b"] {
            if let Some(i) = self.net.params.index_of(name) {
                let t = self.net.params.tensor_mut(i);
                *t = Tensor::zeros(t.shape());
            }
        }
    }
}
