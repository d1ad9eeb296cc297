//! Oracle-judged win rates against a frozen reference, best-of-n curves,
//! per-rating reward-model accuracy, rank correlation and score
//! distributions.

mod stats;

pub use stats::{percentile, spearman, ScoreHistogram};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Conversation, PreferencePair, PromptInstance};
use crate::digest::sha256_hex;
use crate::model::{ModelError, PolicyModel, RewardModel};
use crate::sampling::{
    best_index, candidate_seed, generate_pool, sample_response, Candidate, GenParams, SamplingError,
};
use crate::taskgen::{judge_win, oracle_reward, Rating, TaskInstance};
use crate::vocab::{Token, ASSISTANT, EOS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("benchmark digest mismatch: stored {stored}, computed {computed}")]
    DigestMismatch { stored: String, computed: String },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchItem {
    pub prompt: PromptInstance,
    /// Response of the reference policy.
    pub reference: Vec<Token>,
}

/// Held-out prompts with frozen reference responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub items: Vec<BenchItem>,
    /// Digest of the checkpoint that produced the references.
    pub reference_checkpoint: String,
    pub reference_gen: GenParams,
    /// Digest over everything above.
    pub digest: String,
}

impl Benchmark {
    /// Reference response for each prompt sampled with the same per-prompt
    /// seed that [`eval_winrate`] uses.
    pub fn new(
        prompts: Vec<PromptInstance>,
        reference: &PolicyModel,
        reference_checkpoint: String,
        gen: &GenParams,
    ) -> Result<Self, EvalError> {
        if prompts.is_empty() {
            return Err(EvalError::Empty("benchmark"));
        }
        let responses: Vec<Vec<Token>> = prompts
            .par_iter()
            .map(|p| Ok(sample_response(reference, &p.context, &eval_params(gen, p))?.tokens))
            .collect::<Result<_, SamplingError>>()?;
        let items =
            prompts.into_iter().zip(responses).map(|(prompt, reference)| BenchItem { prompt, reference }).collect();
        let mut b = Benchmark { items, reference_checkpoint, reference_gen: *gen, digest: String::new() };
        b.digest = b.compute_digest();
        Ok(b)
    }

    pub fn compute_digest(&self) -> String {
        let body =
            serde_json::to_vec(&(&self.items, &self.reference_checkpoint, &self.reference_gen)).expect("serializes");
        sha256_hex(&body)
    }

    pub fn verify(&self) -> Result<(), EvalError> {
        let computed = self.compute_digest();
        if computed != self.digest {
            return Err(EvalError::DigestMismatch { stored: self.digest.clone(), computed });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Per-prompt generation parameters: candidate 0 of the prompt's pool.
pub fn eval_params(gen: &GenParams, prompt: &PromptInstance) -> GenParams {
    gen.with_seed(candidate_seed(gen.seed, prompt.prompt_id(), 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub win_rate: f64,
    /// `judge_win` per benchmark item, in benchmark order.
    pub verdicts: Vec<f64>,
    pub mean_oracle_reward: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One sampled response per prompt judged against the stored reference.
pub fn eval_winrate(policy: &PolicyModel, bench: &Benchmark, gen: &GenParams) -> Result<WinRate, EvalError> {
    bench.verify()?;
    let results: Vec<(f64, f64)> = bench
        .items
        .par_iter()
        .map(|it| {
            let r = sample_response(policy, &it.prompt.context, &eval_params(gen, &it.prompt))?;
            let task = &it.prompt.task;
            Ok((judge_win(task, &r.tokens, &it.reference), oracle_reward(task, &r.tokens)))
        })
        .collect::<Result<_, SamplingError>>()?;
    let verdicts: Vec<f64> = results.iter().map(|r| r.0).collect();
    let rewards: Vec<f64> = results.iter().map(|r| r.1).collect();
    Ok(WinRate { win_rate: mean(&verdicts), verdicts, mean_oracle_reward: mean(&rewards) })
}

/// Candidate pools of size `n` for every benchmark prompt.
pub fn bench_pools(
    policy: &PolicyModel,
    bench: &Benchmark,
    n: usize,
    gen: &GenParams,
) -> Result<Vec<Vec<Candidate>>, EvalError> {
    bench.verify()?;
    Ok(bench
        .items
        .par_iter()
        .map(|it| generate_pool(policy, &it.prompt.context, it.prompt.prompt_id(), n, gen))
        .collect::<Result<_, _>>()?)
}

/// How candidates are scored for best-of-n selection.
#[derive(Clone, Copy)]
pub enum Selector<'a> {
    Rm(&'a RewardModel),
    Oracle,
}

/// Selector scores for each pool, aligned with the pools.
pub fn score_pools(
    bench: &Benchmark,
    pools: &[Vec<Candidate>],
    selector: Selector<'_>,
) -> Result<Vec<Vec<f32>>, EvalError> {
    bench
        .items
        .par_iter()
        .zip(pools)
        .map(|(it, pool)| match selector {
            Selector::Rm(rm) => {
                let items: Vec<(&[Token], &[Token])> =
                    pool.iter().map(|c| (it.prompt.context.as_slice(), c.tokens.as_slice())).collect();
                Ok(rm.score_batch(&items)?)
            }
            Selector::Oracle => Ok(pool.iter().map(|c| oracle_reward(&it.prompt.task, &c.tokens) as f32).collect()),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub win_rate: f64,
    /// Mean selector score of the selected responses.
    pub mean_score: f64,
    pub mean_oracle_reward: f64,
}

pub const BEST_OF_NS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

/// Best-of-n on prefix pools: size `n` uses the first `n` candidates.
pub fn curve_from_pools(
    bench: &Benchmark,
    pools: &[Vec<Candidate>],
    scores: &[Vec<f32>],
    ns: &[usize],
) -> Vec<CurvePoint> {
    ns.iter()
        .map(|&n| {
            let mut wins = Vec::with_capacity(pools.len());
            let mut sel = Vec::with_capacity(pools.len());
            let mut rewards = Vec::with_capacity(pools.len());
            for ((it, pool), s) in bench.items.iter().zip(pools).zip(scores) {
                let k = n.min(pool.len());
                let b = best_index(&s[..k]).expect("nonempty pool");
                let tokens = &pool[b].tokens;
                wins.push(judge_win(&it.prompt.task, tokens, &it.reference));
                rewards.push(oracle_reward(&it.prompt.task, tokens));
                sel.push(s[b] as f64);
            }
            CurvePoint { n, win_rate: mean(&wins), mean_score: mean(&sel), mean_oracle_reward: mean(&rewards) }
        })
        .collect()
}

/// Best-of-n curve; one pool of `max(ns)` per prompt shared by every `n`.
pub fn eval_best_of_n(
    policy: &PolicyModel,
    selector: Selector<'_>,
    bench: &Benchmark,
    ns: &[usize],
    gen: &GenParams,
) -> Result<Vec<CurvePoint>, EvalError> {
    let nmax = *ns.iter().max().ok_or(EvalError::Empty("ns"))?;
    let pools = bench_pools(policy, bench, nmax, gen)?;
    let scores = score_pools(bench, &pools, selector)?;
    Ok(curve_from_pools(bench, &pools, &scores, ns))
}

/// Spearman correlation between mean selector score and win rate.
pub fn score_winrate_correlation(curve: &[CurvePoint]) -> Option<f64> {
    if curve.len() < 4 {
        return None;
    }
    let s: Vec<f64> = curve.iter().map(|p| p.mean_score).collect();
    let w: Vec<f64> = curve.iter().map(|p| p.win_rate).collect();
    spearman(&s, &w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketAccuracy {
    pub rating: Rating,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Pairwise accuracy per rating bucket. Pairs whose oracle margin is
/// exactly zero carry an arbitrary label and are counted separately.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GranularAccuracy {
    /// Populated buckets only, in rating order.
    pub buckets: Vec<BucketAccuracy>,
    pub overall: f64,
    pub decided: usize,
    pub zero_margin_excluded: usize,
}

impl GranularAccuracy {
    pub fn bucket(&self, rating: Rating) -> Option<&BucketAccuracy> {
        self.buckets.iter().find(|b| b.rating == rating)
    }

    /// Bucket accuracies averaged with bucket sizes as weights.
    pub fn weighted_average(&self) -> f64 {
        let n: usize = self.buckets.iter().map(|b| b.total).sum();
        self.buckets.iter().map(|b| b.accuracy * b.total as f64).sum::<f64>() / n as f64
    }
}

/// Accuracy table from precomputed winner/loser scores.
pub fn granular_accuracy_from_scores(pairs: &[PreferencePair], chosen: &[f32], rejected: &[f32]) -> GranularAccuracy {
    let mut acc = GranularAccuracy::default();
    let mut correct_total = 0;
    for rating in Rating::ALL {
        let (mut correct, mut total) = (0, 0);
        for (i, p) in pairs.iter().enumerate() {
            if p.rating != rating {
                continue;
            }
            if p.margin == 0.0 {
                acc.zero_margin_excluded += 1;
                continue;
            }
            total += 1;
            if chosen[i] > rejected[i] {
                correct += 1;
            }
        }
        if total > 0 {
            acc.buckets.push(BucketAccuracy { rating, correct, total, accuracy: correct as f64 / total as f64 });
        }
        acc.decided += total;
        correct_total += correct;
    }
    acc.overall = if acc.decided == 0 { f64::NAN } else { correct_total as f64 / acc.decided as f64 };
    acc
}

pub fn granular_accuracy(rm: &RewardModel, pairs: &[PreferencePair]) -> Result<GranularAccuracy, ModelError> {
    let chosen: Vec<(&[Token], &[Token])> =
        pairs.iter().map(|p| (p.prompt.context.as_slice(), p.chosen.as_slice())).collect();
    let rejected: Vec<(&[Token], &[Token])> =
        pairs.iter().map(|p| (p.prompt.context.as_slice(), p.rejected.as_slice())).collect();
    let sc = rm.score_batch(&chosen)?;
    let sr = rm.score_batch(&rejected)?;
    Ok(granular_accuracy_from_scores(pairs, &sc, &sr))
}

/// Reward-model scores of one sampled response per benchmark prompt.
pub fn sampled_scores(
    policy: &PolicyModel,
    rm: &RewardModel,
    bench: &Benchmark,
    gen: &GenParams,
) -> Result<Vec<f64>, EvalError> {
    bench.verify()?;
    let responses: Vec<Vec<Token>> = bench
        .items
        .par_iter()
        .map(|it| Ok(sample_response(policy, &it.prompt.context, &eval_params(gen, &it.prompt))?.tokens))
        .collect::<Result<_, SamplingError>>()?;
    let items: Vec<(&[Token], &[Token])> =
        bench.items.iter().zip(&responses).map(|(it, r)| (it.prompt.context.as_slice(), r.as_slice())).collect();
    Ok(rm.score_batch(&items)?.into_iter().map(|s| s as f64).collect())
}

pub fn score_histogram(
    policy: &PolicyModel,
    rm: &RewardModel,
    bench: &Benchmark,
    gen: &GenParams,
    edges: &[f64],
) -> Result<ScoreHistogram, EvalError> {
    Ok(ScoreHistogram::new(&sampled_scores(policy, rm, bench, gen)?, edges))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTurnReport {
    /// Mean oracle reward over the turns of each conversation.
    pub per_conversation: Vec<f64>,
    pub mean_reward: f64,
    /// Fraction of turns answered exactly.
    pub exact_rate: f64,
}

/// Turn-by-turn evaluation where the history holds the policy's own
/// earlier answers.
pub fn eval_multiturn(
    policy: &PolicyModel,
    convs: &[Conversation],
    gen: &GenParams,
) -> Result<MultiTurnReport, EvalError> {
    if convs.is_empty() {
        return Err(EvalError::Empty("conversations"));
    }
    let results: Vec<(f64, usize, usize)> = convs
        .par_iter()
        .map(|c| {
            let mut context = Vec::new();
            if let Some(sys) = c.system() {
                sys.serialize_into(&mut context);
            }
            let (mut total, mut exact, mut turns) = (0.0, 0, 0);
            for (t, (user, _)) in c.turns().into_iter().enumerate() {
                user.serialize_into(&mut context);
                context.push(ASSISTANT);
                let task = TaskInstance::parse(&user.tokens).map_err(|_| EvalError::Empty("task"))?;
                let g = gen.with_seed(candidate_seed(gen.seed, c.id, t as u64));
                let r = sample_response(policy, &context, &g)?.tokens;
                let reward = oracle_reward(&task, &r);
                total += reward;
                exact += usize::from(reward == 1.0);
                turns += 1;
                context.extend(r.iter().copied().take_while(|&x| x != EOS));
                context.push(EOS);
            }
            Ok((total / turns as f64, exact, turns))
        })
        .collect::<Result<_, EvalError>>()?;
    let per_conversation: Vec<f64> = results.iter().map(|r| r.0).collect();
    let exact: usize = results.iter().map(|r| r.1).sum();
    let turns: usize = results.iter().map(|r| r.2).sum();
    Ok(MultiTurnReport {
        mean_reward: mean(&per_conversation),
        per_conversation,
        exact_rate: exact as f64 / turns as f64,
    })
}
