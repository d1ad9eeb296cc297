use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{run_epochs, sequence_logprobs, StepLog, TrainConfig, TrainError};
use crate::datasets::{split_of, RankedRecord, Split};
use crate::model::{Checkpoint, ModelError, PolicyModel, RewardModel, Stage, Transformer};
use crate::numcore::{NumError, Scalar, Tape, Tensor, Var};
use crate::sampling::{sample_response, GenParams};
use crate::seeding::{derive_seed, rng};
use crate::vocab::Token;

const REF_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoItem {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

/// Preference pairs with reference log-probabilities computed once from
/// the frozen reference policy.
#[derive(Clone, Debug, PartialEq)]
pub struct DpoPairBatch {
    pub items: Vec<DpoItem>,
    pub ref_chosen: Vec<f64>,
    pub ref_rejected: Vec<f64>,
    pub length_normalize: bool,
}

fn policy_logprobs(
    net: &Transformer,
    tape: &mut Tape<f32>,
    items: &[&DpoItem],
    length_normalize: bool,
) -> Result<(Var, Var), ModelError> {
    let chosen: Vec<(&[Token], &[Token])> = items.iter().map(|i| (i.prompt.as_slice(), i.chosen.as_slice())).collect();
    let rejected: Vec<(&[Token], &[Token])> =
        items.iter().map(|i| (i.prompt.as_slice(), i.rejected.as_slice())).collect();
    let mut w = sequence_logprobs(net, tape, &chosen)?;
    let mut l = sequence_logprobs(net, tape, &rejected)?;
    if length_normalize {
        let inv = |v: &[(&[Token], &[Token])]| Tensor::from_vec(v.iter().map(|(_, r)| 1.0 / r.len() as f32).collect());
        let iw = tape.leaf(inv(&chosen));
        let il = tape.leaf(inv(&rejected));
        w = tape.mul(w, iw)?;
        l = tape.mul(l, il)?;
    }
    Ok((w, l))
}

impl DpoPairBatch {
    pub fn new(reference: &PolicyModel, items: Vec<DpoItem>, length_normalize: bool) -> Result<Self, ModelError> {
        let mut ref_chosen = Vec::with_capacity(items.len());
        let mut ref_rejected = Vec::with_capacity(items.len());
        for chunk in items.chunks(REF_CHUNK) {
            let refs: Vec<&DpoItem> = chunk.iter().collect();
            let mut tape = Tape::new();
            let (w, l) = policy_logprobs(&reference.net, &mut tape, &refs, length_normalize)?;
            ref_chosen.extend(tape.value(w).data().iter().map(|&x| x as f64));
            ref_rejected.extend(tape.value(l).data().iter().map(|&x| x as f64));
        }
        Ok(Self { items, ref_chosen, ref_rejected, length_normalize })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `(Δ_w − Δ_l)` per pair under `policy`, unscaled by β.
    pub fn margins(&self, policy: &PolicyModel) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(self.len());
        for (c, chunk) in self.items.chunks(REF_CHUNK).enumerate() {
            let refs: Vec<&DpoItem> = chunk.iter().collect();
            let mut tape = Tape::new();
            let (w, l) = policy_logprobs(&policy.net, &mut tape, &refs, self.length_normalize)?;
            for (j, (pw, pl)) in tape.value(w).data().iter().zip(tape.value(l).data()).enumerate() {
                let i = c * REF_CHUNK + j;
                out.push((*pw as f64 - self.ref_chosen[i]) - (*pl as f64 - self.ref_rejected[i]));
            }
        }
        Ok(out)
    }
}

/// `mean(−log σ(β·((π_w − ref_w) − (π_l − ref_l))))` with the reference
/// difference `ref_w − ref_l` supplied per pair.
pub fn dpo_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    policy_chosen: Var,
    policy_rejected: Var,
    ref_diff: &[f64],
    beta: f64,
) -> Result<Var, NumError> {
    let d = tape.sub(policy_chosen, policy_rejected)?;
    let r = tape.leaf(Tensor::from_vec(ref_diff.iter().map(|&x| T::from_f64(x)).collect()));
    let m = tape.sub(d, r)?;
    let scaled = tape.affine(m, T::from_f64(beta), T::ZERO)?;
    let ls = tape.log_sigmoid(scaled)?;
    let mean = tape.mean(ls)?;
    tape.affine(mean, -T::ONE, T::ZERO)
}

fn batch_loss(
    net: &Transformer,
    tape: &mut Tape<f32>,
    batch: &DpoPairBatch,
    idx: &[usize],
    beta: f64,
) -> Result<Var, ModelError> {
    let items: Vec<&DpoItem> = idx.iter().map(|&i| &batch.items[i]).collect();
    let (w, l) = policy_logprobs(net, tape, &items, batch.length_normalize)?;
    let ref_diff: Vec<f64> = idx.iter().map(|&i| batch.ref_chosen[i] - batch.ref_rejected[i]).collect();
    Ok(dpo_loss_var(tape, w, l, &ref_diff, beta)?)
}

/// DPO loss of the whole batch under `policy`.
pub fn dpo_loss(policy: &PolicyModel, batch: &DpoPairBatch, beta: f64) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let idx: Vec<usize> = (0..batch.len()).collect();
    let v = batch_loss(&policy.net, &mut tape, batch, &idx, beta)?;
    Ok(tape.value(v).item()? as f64)
}

/// Mean reward-model score at each rank (index 0 is rank 1).
pub fn mean_score_per_rank(set: &[RankedRecord]) -> Vec<f64> {
    let n = set.iter().map(|r| r.responses.len()).max().unwrap_or(0);
    (0..n)
        .map(|k| {
            let s: Vec<f64> = set.iter().filter_map(|r| r.responses.get(k)).map(|x| x.score as f64).collect();
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispreferredSelection {
    /// 1-based rank in the set whose mean score is closest to the policy's.
    pub rank: usize,
    pub policy_mean_score: f64,
    pub per_rank_mean: Vec<f64>,
    pub probes: usize,
}

/// Probes the policy on `probe_m` seeded prompts of the set and picks the
/// rank whose mean set score is nearest its mean score; ties go to the
/// larger rank.
pub fn select_dispreferred_rank(
    policy: &PolicyModel,
    set: &[RankedRecord],
    probe_m: usize,
    rm: &RewardModel,
    gen: &GenParams,
    seed: u64,
) -> Result<DispreferredSelection, TrainError> {
    if set.is_empty() || probe_m == 0 {
        return Err(TrainError::EmptyData);
    }
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.shuffle(&mut rng(derive_seed(&[seed, 0x9B0B])));
    idx.truncate(probe_m.min(set.len()));
    let mut responses = Vec::with_capacity(idx.len());
    for &i in &idx {
        let p = &set[i].prompt;
        let g = gen.with_seed(derive_seed(&[seed, p.prompt_id()]));
        responses.push(sample_response(policy, &p.context, &g)?.tokens);
    }
    let items: Vec<(&[Token], &[Token])> =
        idx.iter().zip(&responses).map(|(&i, r)| (set[i].prompt.context.as_slice(), r.as_slice())).collect();
    let scores = rm.score_batch(&items)?;
    let policy_mean_score = scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len() as f64;
    let per_rank_mean = mean_score_per_rank(set);
    let mut rank = 1;
    for (k, &m) in per_rank_mean.iter().enumerate() {
        if (m - policy_mean_score).abs() <= (per_rank_mean[rank - 1] - policy_mean_score).abs() {
            rank = k + 1;
        }
    }
    Ok(DispreferredSelection { rank, policy_mean_score, per_rank_mean, probes: idx.len() })
}

/// `(top-1, rank-k)` pairs of the set, skipping records where both are
/// the same token sequence.
pub fn dpo_pairs(set: &[RankedRecord], rejected_rank: usize) -> Result<Vec<(usize, DpoItem)>, TrainError> {
    let mut out = Vec::new();
    for (i, r) in set.iter().enumerate() {
        let best = r.at_rank(1).ok_or(TrainError::RankOutOfRange { rank: 1, pool: 0 })?;
        let worse = r
            .at_rank(rejected_rank)
            .ok_or(TrainError::RankOutOfRange { rank: rejected_rank, pool: r.responses.len() })?;
        if best.tokens != worse.tokens {
            out.push((
                i,
                DpoItem {
                    prompt: r.prompt.context.clone(),
                    chosen: best.tokens.clone(),
                    rejected: worse.tokens.clone(),
                },
            ));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoOutcome {
    #[serde(skip)]
    pub policy: Option<PolicyModel>,
    pub rejected_rank: usize,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub skipped_identical: usize,
    pub initial_loss: f64,
    /// Mean `Δ_w − Δ_l` on held-out pairs after training.
    pub heldout_mean_margin: f64,
    /// Fraction of held-out pairs with positive implicit reward margin.
    pub heldout_accuracy: f64,
    pub log: Vec<StepLog>,
}

/// DPO from an RS checkpoint on (top-1, rank-`rejected_rank`) pairs; the
/// reference is a frozen copy of the initial policy.
pub fn dpo_train(
    init: &Checkpoint,
    set: &[RankedRecord],
    rejected_rank: usize,
    cfg: &TrainConfig,
) -> Result<DpoOutcome, TrainError> {
    init.expect_stage(&[Stage::Rs])?;
    cfg.validate()?;
    let reference = PolicyModel::try_from(init.net.clone())?;
    let pairs = dpo_pairs(set, rejected_rank)?;
    let skipped_identical = set.len() - pairs.len();
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, item) in pairs {
        match split_of(set[i].prompt.prompt_id(), 0.05) {
            Split::Train => train.push(item),
            Split::Val => heldout.push(item),
        }
    }
    let train = DpoPairBatch::new(&reference, train, cfg.dpo_length_normalize)?;
    let heldout = DpoPairBatch::new(&reference, heldout, cfg.dpo_length_normalize)?;
    let mut net = reference.net.clone();
    let beta = cfg.dpo_beta;
    let log = run_epochs(&mut net, train.len(), cfg, |net, idx, tape| Ok(batch_loss(net, tape, &train, idx, beta)?))?;
    let policy = PolicyModel { net };
    let margins = heldout.margins(&policy)?;
    let n = margins.len().max(1) as f64;
    Ok(DpoOutcome {
        rejected_rank,
        train_pairs: train.len(),
        heldout_pairs: heldout.len(),
        skipped_identical,
        initial_loss: log.first().map_or(f64::NAN, |l| l.loss),
        heldout_mean_margin: margins.iter().sum::<f64>() / n,
        heldout_accuracy: margins.iter().filter(|&&m| m > 0.0).count() as f64 / n,
        policy: Some(policy),
        log,
    })
}
