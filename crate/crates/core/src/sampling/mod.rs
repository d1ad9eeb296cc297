//! Temperature / top-k / top-p decoding, seeded candidate pools and
//! best-of-n selection.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{KvCache, ModelError, PolicyModel, RewardModel};
use crate::seeding::{derive_seed, rng};
use crate::vocab::{Token, EOS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("empty pool")]
    EmptyPool,
    #[error("prompt of {prompt} tokens plus {max_new} new tokens exceeds context length {ctx}")]
    ContextOverflow { prompt: usize, max_new: usize, ctx: usize },
    #[error("invalid generation parameters: {0}")]
    Params(String),
    #[error("{scores} scores for a pool of {pool}")]
    ScoreCount { scores: usize, pool: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    /// 0 means greedy argmax.
    pub temperature: f64,
    /// 1.0 disables nucleus truncation.
    pub top_p: f64,
    /// 0 disables top-k truncation.
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { temperature: 0.7, top_p: 1.0, top_k: 0, max_new_tokens: 16, seed: 0 }
    }
}

impl GenParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { temperature: 0.0, max_new_tokens, ..Self::default() }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_temperature(self, temperature: f64) -> Self {
        Self { temperature, ..self }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(SamplingError::Params(format!("temperature {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(SamplingError::Params(format!("top_p {}", self.top_p)));
        }
        if self.max_new_tokens == 0 {
            return Err(SamplingError::Params("max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    fn is_greedy(&self) -> bool {
        self.temperature == 0.0 || self.top_k == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Sampled response, ending with end-of-sequence unless cut off.
    pub tokens: Vec<Token>,
    /// Log-probability of `tokens` under the unmodified model distribution.
    pub logprob: f64,
    pub rm_score: Option<f32>,
    /// 1 is best.
    pub rank: Option<usize>,
}

/// Seed of candidate `index` in the pool for `prompt_id`.
pub fn candidate_seed(seed: u64, prompt_id: u64, index: u64) -> u64 {
    derive_seed(&[seed, prompt_id, index])
}

fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Support and renormalized probabilities after temperature scaling, top-k
/// and then top-p truncation, most probable first.
pub fn filtered_distribution(logits: &[f32], params: &GenParams) -> Vec<(usize, f64)> {
    if params.is_greedy() {
        return vec![(argmax(logits), 1.0)];
    }
    let t = params.temperature;
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let mut probs: Vec<(usize, f64)> =
        logits.iter().enumerate().map(|(i, &x)| (i, ((x as f64 - m) / t).exp())).collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if params.top_k > 0 {
        probs.truncate(params.top_k);
    }
    if params.top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = probs.len();
        for (i, p) in probs.iter().enumerate() {
            cum += p.1;
            if cum >= params.top_p {
                keep = i + 1;
                break;
            }
        }
        probs.truncate(keep);
    }
    let total: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= total);
    probs
}

fn draw<R: Rng>(dist: &[(usize, f64)], r: &mut R) -> usize {
    if dist.len() == 1 {
        return dist[0].0;
    }
    let u: f64 = r.random();
    let mut cum = 0.0;
    for &(i, p) in dist {
        cum += p;
        if u < cum {
            return i;
        }
    }
    dist.last().unwrap().0
}

fn check_prompt(model: &PolicyModel, prompt: &[Token], params: &GenParams) -> Result<(), SamplingError> {
    params.validate()?;
    if prompt.is_empty() {
        return Err(SamplingError::EmptyPrompt);
    }
    let ctx = model.config().ctx_len;
    if prompt.len() + params.max_new_tokens > ctx {
        return Err(SamplingError::ContextOverflow { prompt: prompt.len(), max_new: params.max_new_tokens, ctx });
    }
    Ok(())
}

fn decode(
    model: &PolicyModel,
    mut cache: KvCache,
    mut logits: Vec<f32>,
    params: &GenParams,
) -> Result<Candidate, SamplingError> {
    let weights = model.net.weights()?;
    let mut r = rng(params.seed);
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    for i in 0..params.max_new_tokens {
        let dist = filtered_distribution(&logits, params);
        let tok = draw(&dist, &mut r);
        logprob += crate::model::log_softmax_f64(&logits, tok);
        tokens.push(tok as Token);
        if tok as Token == EOS || i + 1 == params.max_new_tokens {
            break;
        }
        logits = weights.step(&mut cache, tok as Token)?;
    }
    Ok(Candidate { tokens, logprob, rm_score: None, rank: None })
}

/// Autoregressive sample, stopping at end-of-sequence or the token limit.
pub fn sample_response(model: &PolicyModel, prompt: &[Token], params: &GenParams) -> Result<Candidate, SamplingError> {
    check_prompt(model, prompt, params)?;
    let (cache, logits) = model.net.prefill(prompt)?;
    decode(model, cache, logits, params)
}

/// `n` candidates; candidate `i` is `sample_response` with seed
/// [`candidate_seed`]`(params.seed, prompt_id, i)`. The prompt is encoded
/// once and its cache shared.
pub fn generate_pool(
    model: &PolicyModel,
    prompt: &[Token],
    prompt_id: u64,
    n: usize,
    params: &GenParams,
) -> Result<Vec<Candidate>, SamplingError> {
    if n == 0 {
        return Err(SamplingError::EmptyPool);
    }
    check_prompt(model, prompt, params)?;
    let (cache, logits) = model.net.prefill(prompt)?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let p = params.with_seed(candidate_seed(params.seed, prompt_id, i));
            decode(model, cache.clone(), logits.clone(), &p)
        })
        .collect()
}

/// Attaches scores and ranks (descending score, ties by pool index) and
/// returns the index of the rank-1 candidate.
pub fn rank_pool(pool: &mut [Candidate], scores: &[f32]) -> Result<usize, SamplingError> {
    if pool.is_empty() {
        return Err(SamplingError::EmptyPool);
    }
    if scores.len() != pool.len() {
        return Err(SamplingError::ScoreCount { scores: scores.len(), pool: pool.len() });
    }
    let order = rank_order(scores);
    for (rank, &i) in order.iter().enumerate() {
        pool[i].rm_score = Some(scores[i]);
        pool[i].rank = Some(rank + 1);
    }
    Ok(order[0])
}

/// Indices sorted by descending score, ties by ascending index.
pub fn rank_order(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Index of the highest score, lowest index on ties.
pub fn best_index(scores: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Scores the pool with the reward model, ranks it and returns the winner.
pub fn best_of_n(pool: &mut [Candidate], rm: &RewardModel, prompt: &[Token]) -> Result<Candidate, SamplingError> {
    if pool.is_empty() {
        return Err(SamplingError::EmptyPool);
    }
    let items: Vec<(&[Token], &[Token])> = pool.iter().map(|c| (prompt, c.tokens.as_slice())).collect();
    let scores = rm.score_batch(&items)?;
    let best = rank_pool(pool, &scores)?;
    Ok(pool[best].clone())
}
