use super::{run_epochs, StepLog, TrainConfig, TrainError};
use crate::datasets::{PromptInstance, RankedRecord};
use crate::model::{Checkpoint, ModelError, PolicyModel, Stage, Transformer};
use crate::numcore::{Tape, Var};
use crate::vocab::Token;

/// Mean next-token cross-entropy over the masked (response) positions of a
/// batch of examples.
pub fn sft_loss(net: &Transformer, tape: &mut Tape<f32>, examples: &[&PromptInstance]) -> Result<Var, ModelError> {
    let seqs: Vec<(Vec<Token>, Vec<bool>)> = examples.iter().map(|e| e.sequence()).collect();
    let refs: Vec<&[Token]> = seqs.iter().map(|s| s.0.as_slice()).collect();
    let batch = net.pack(&refs)?;
    let (targets, mask) = next_token_targets(&seqs);
    let logits = net.lm_logits(tape, &batch)?;
    Ok(tape.cross_entropy(logits, &targets, &mask)?)
}

/// Packed next-token targets and the positions whose target is a masked-in
/// token; the final position of every sequence is masked out.
pub fn next_token_targets(seqs: &[(Vec<Token>, Vec<bool>)]) -> (Vec<usize>, Vec<bool>) {
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for (seq, m) in seqs {
        for t in 0..seq.len() {
            if t + 1 < seq.len() {
                targets.push(seq[t + 1] as usize);
                mask.push(m[t + 1]);
            } else {
                targets.push(0);
                mask.push(false);
            }
        }
    }
    (targets, mask)
}

/// Summed log-probability of each response given its prompt, `[n]`.
pub fn sequence_logprobs(
    net: &Transformer,
    tape: &mut Tape<f32>,
    items: &[(&[Token], &[Token])],
) -> Result<Var, ModelError> {
    let seqs: Vec<Vec<Token>> = items
        .iter()
        .map(|(p, r)| {
            let mut s = p.to_vec();
            s.extend_from_slice(r);
            s
        })
        .collect();
    let refs: Vec<&[Token]> = seqs.iter().map(Vec::as_slice).collect();
    let batch = net.pack(&refs)?;
    let mut targets = Vec::with_capacity(batch.ids.len());
    let mut mask = Vec::with_capacity(batch.ids.len());
    for (seq, (p, _)) in seqs.iter().zip(items) {
        for t in 0..seq.len() {
            let predicts_response = t + 1 < seq.len() && t + 1 >= p.len();
            targets.push(if t + 1 < seq.len() { seq[t + 1] as usize } else { 0 });
            mask.push(predicts_response);
        }
    }
    let logits = net.lm_logits(tape, &batch)?;
    let lp = tape.token_logprob(logits, &targets)?;
    Ok(tape.segment_sum(lp, &batch.layout, &mask)?)
}

/// Masked cross-entropy finetuning.
pub fn sft_train(
    base: &PolicyModel,
    data: &[PromptInstance],
    cfg: &TrainConfig,
) -> Result<(PolicyModel, Vec<StepLog>), TrainError> {
    let mut net = base.net.clone();
    let log = run_epochs(&mut net, data.len(), cfg, |net, idx, tape| {
        let batch: Vec<&PromptInstance> = idx.iter().map(|&i| &data[i]).collect();
        Ok(sft_loss(net, tape, &batch)?)
    })?;
    Ok((PolicyModel { net }, log))
}

/// One example per record: its prompt with the rank-`k` response among the
/// first `pool_n` pool candidates as target, loss on that response only.
pub fn rs_examples(set: &[RankedRecord], rank_k: usize, pool_n: usize) -> Result<Vec<PromptInstance>, TrainError> {
    set.iter()
        .map(|r| {
            let sub = r.pool_prefix(pool_n);
            sub.at_rank(rank_k)
                .map(|resp| r.prompt.with_response(resp.tokens.clone()))
                .ok_or(TrainError::RankOutOfRange { rank: rank_k, pool: sub.responses.len() })
        })
        .collect()
}

/// Finetunes the SFT checkpoint on the rank-`cfg.rs_rank_k` responses.
pub fn rs_train(
    init: &Checkpoint,
    set: &[RankedRecord],
    cfg: &TrainConfig,
) -> Result<(PolicyModel, Vec<StepLog>), TrainError> {
    init.expect_stage(&[Stage::Sft])?;
    let policy = PolicyModel::try_from(init.net.clone())?;
    let data = rs_examples(set, cfg.rs_rank_k, cfg.rs_pool_n)?;
    sft_train(&policy, &data, cfg)
}
