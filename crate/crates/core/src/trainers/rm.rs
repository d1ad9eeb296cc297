use serde::{Deserialize, Serialize};

use super::{run_epochs, StepLog, TrainConfig, TrainError};
use crate::datasets::{PreferencePair, Split};
use crate::eval::{granular_accuracy, GranularAccuracy};
use crate::model::{Checkpoint, ModelError, PolicyModel, RewardModel, Stage, Transformer};
use crate::numcore::{Scalar, Tape, Var};
use crate::vocab::Token;

/// `mean(−log σ(s_w − s_l))` for score vectors of equal length.
pub fn bt_loss_var<T: Scalar>(tape: &mut Tape<T>, winners: Var, losers: Var) -> Result<Var, crate::numcore::NumError> {
    let d = tape.sub(winners, losers)?;
    let ls = tape.log_sigmoid(d)?;
    let m = tape.mean(ls)?;
    tape.affine(m, -T::ONE, T::ZERO)
}

/// Bradley-Terry loss of a single score difference.
pub fn rm_loss_value(diff: f64) -> f64 {
    -crate::numcore::log_sigmoid(diff)
}

/// Loss recorded on `tape` for a batch of `(prompt, winner, loser)`.
pub fn rm_loss(
    net: &Transformer,
    tape: &mut Tape<f32>,
    items: &[(&[Token], &[Token], &[Token])],
) -> Result<Var, ModelError> {
    let mut seqs: Vec<Vec<Token>> = Vec::with_capacity(items.len() * 2);
    for (p, y, _) in items {
        seqs.push(crate::model::scoring_sequence(p, y));
    }
    for (p, _, y) in items {
        seqs.push(crate::model::scoring_sequence(p, y));
    }
    let refs: Vec<&[Token]> = seqs.iter().map(Vec::as_slice).collect();
    let batch = net.pack(&refs)?;
    let scores = net.reward_scores(tape, &batch)?;
    let n = items.len();
    let w = tape.gather_rows(scores, &(0..n).collect::<Vec<_>>())?;
    let l = tape.gather_rows(scores, &(n..2 * n).collect::<Vec<_>>())?;
    Ok(bt_loss_var(tape, w, l)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmOutcome {
    #[serde(skip)]
    pub rm: Option<RewardModel>,
    pub final_train_loss: f64,
    pub val: GranularAccuracy,
    pub log: Vec<StepLog>,
}

/// Reward model from an SFT checkpoint plus a fresh head, trained on the
/// train split of `pairs` and evaluated on the val split.
pub fn rm_train(init: &Checkpoint, pairs: &[PreferencePair], cfg: &TrainConfig) -> Result<RmOutcome, TrainError> {
    init.expect_stage(&[Stage::Sft])?;
    let policy = PolicyModel::try_from(init.net.clone())?;
    let rm = RewardModel::from_policy(&policy, crate::seeding::derive_seed(&[cfg.seed, 0x4EAD]))?;
    let train: Vec<&PreferencePair> = pairs.iter().filter(|p| p.split == Split::Train).collect();
    let val: Vec<PreferencePair> = pairs.iter().filter(|p| p.split == Split::Val).cloned().collect();
    let mut net = rm.net;
    let log = run_epochs(&mut net, train.len(), cfg, |net, idx, tape| {
        let items: Vec<(&[Token], &[Token], &[Token])> = idx
            .iter()
            .map(|&i| (train[i].prompt.context.as_slice(), train[i].chosen.as_slice(), train[i].rejected.as_slice()))
            .collect();
        Ok(rm_loss(net, tape, &items)?)
    })?;
    let rm = RewardModel { net };
    let tail = log.len().min(10);
    let final_train_loss = log[log.len() - tail..].iter().map(|l| l.loss).sum::<f64>() / tail as f64;
    let val = granular_accuracy(&rm, &val)?;
    Ok(RmOutcome { rm: Some(rm), final_train_loss, val, log })
}
