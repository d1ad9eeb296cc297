use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PreferencePair, PromptInstance, RankedRecord, ScoredResponse, Split};
use crate::model::{PolicyModel, RewardModel};
use crate::sampling::{generate_pool, rank_order, sample_response, GenParams, SamplingError};
use crate::seeding::{derive_seed, unit_from_hash};
use crate::taskgen::{oracle_annotate, oracle_reward, Rating, Side};
use crate::vocab::Token;

/// Deterministic train/val assignment by hash of the prompt id.
pub fn split_of(prompt_id: u64, val_fraction: f64) -> Split {
    if unit_from_hash(derive_seed(&[0x5EED_5B17, prompt_id])) < val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairBuildConfig {
    pub temperatures: (f64, f64),
    pub top_p: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub val_fraction: f64,
    /// Probability that the annotator flips its verdict.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PairBuildConfig {
    fn default() -> Self {
        Self {
            temperatures: (0.7, 0.3),
            top_p: 1.0,
            top_k: 0,
            max_new_tokens: 16,
            val_fraction: 0.05,
            noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairBuildReport {
    pub prompts: usize,
    pub pairs: usize,
    pub failed: usize,
    pub errors: Vec<String>,
}

fn build_one(p: &PromptInstance, policy: &PolicyModel, cfg: &PairBuildConfig) -> Result<PreferencePair, SamplingError> {
    let pid = p.prompt_id();
    let gen = |temperature: f64, slot: u64| GenParams {
        temperature,
        top_p: cfg.top_p,
        top_k: cfg.top_k,
        max_new_tokens: cfg.max_new_tokens,
        seed: derive_seed(&[cfg.seed, pid, slot]),
    };
    let hot = sample_response(policy, &p.context, &gen(cfg.temperatures.0, 0))?.tokens;
    let cold = sample_response(policy, &p.context, &gen(cfg.temperatures.1, 1))?.tokens;
    let pair_seed = derive_seed(&[cfg.seed, pid, 2]);
    // presentation order is shuffled per pair before annotation
    let (a, b) = if unit_from_hash(pair_seed) < 0.5 { (hot, cold) } else { (cold, hot) };
    let verdict = oracle_annotate(&p.task, &a, &b, pair_seed, cfg.noise);
    let (chosen, rejected) = match verdict.winner {
        Side::A => (a, b),
        Side::B => (b, a),
    };
    let margin = oracle_reward(&p.task, &chosen) - oracle_reward(&p.task, &rejected);
    let reason = if verdict.winner == Side::A { verdict.reason.clone() } else { verdict.mirrored().reason };
    Ok(PreferencePair {
        prompt: p.clone(),
        chosen,
        rejected,
        rating: verdict.rating,
        margin,
        split: split_of(pid, cfg.val_fraction),
        reason,
    })
}

/// Two samples per prompt at the two configured temperatures, annotated by
/// the oracle in shuffled order. Output order follows the input prompts.
pub fn build_pair_dataset(
    prompts: &[PromptInstance],
    policy: &PolicyModel,
    cfg: &PairBuildConfig,
) -> (Vec<PreferencePair>, PairBuildReport) {
    let results: Vec<_> = prompts.par_iter().map(|p| build_one(p, policy, cfg)).collect();
    let mut report = PairBuildReport { prompts: prompts.len(), ..Default::default() };
    let mut pairs = Vec::with_capacity(prompts.len());
    for (p, r) in prompts.iter().zip(results) {
        match r {
            Ok(pair) => pairs.push(pair),
            Err(e) => {
                report.failed += 1;
                report.errors.push(format!("prompt {}: {e}", p.prompt_id()));
            }
        }
    }
    report.pairs = pairs.len();
    (pairs, report)
}

/// Keeps pairs whose rating is at least `min`.
pub fn filter_min_rating(pairs: Vec<PreferencePair>, min: Rating) -> Vec<PreferencePair> {
    let floor = Rating::ALL.iter().position(|&r| r == min).unwrap();
    pairs.into_iter().filter(|p| Rating::ALL.iter().position(|&r| r == p.rating).unwrap() <= floor).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedBuildConfig {
    pub pool_n: usize,
    pub gen: GenParams,
    /// Only the first `max_turns` turns of each conversation are used.
    pub max_turns: usize,
}

impl Default for RankedBuildConfig {
    fn default() -> Self {
        Self { pool_n: 64, gen: GenParams::default(), max_turns: 3 }
    }
}

/// Prompts eligible for the ranked set.
pub fn ranked_prompts<'a>(prompts: &'a [PromptInstance], cfg: &RankedBuildConfig) -> Vec<&'a PromptInstance> {
    prompts.iter().filter(|p| p.turn_index < cfg.max_turns).collect()
}

/// One reward-ranked pool per eligible prompt, best first.
pub fn build_ranked_set(
    prompts: &[PromptInstance],
    policy: &PolicyModel,
    rm: &RewardModel,
    cfg: &RankedBuildConfig,
) -> Result<Vec<RankedRecord>, SamplingError> {
    if cfg.pool_n < 2 {
        return Err(SamplingError::Params(format!("pool size {} < 2", cfg.pool_n)));
    }
    ranked_prompts(prompts, cfg)
        .into_par_iter()
        .map(|p| {
            let pool = generate_pool(policy, &p.context, p.prompt_id(), cfg.pool_n, &cfg.gen)?;
            let items: Vec<(&[Token], &[Token])> =
                pool.iter().map(|c| (p.context.as_slice(), c.tokens.as_slice())).collect();
            let scores = rm.score_batch(&items)?;
            let responses = rank_order(&scores)
                .into_iter()
                .map(|i| ScoredResponse { tokens: pool[i].tokens.clone(), score: scores[i], pool_index: i })
                .collect();
            Ok(RankedRecord { prompt: p.clone(), responses })
        })
        .collect()
}
