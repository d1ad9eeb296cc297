//! Supervised finetuning, reward modeling, rejection-sampling finetuning
//! and direct preference optimization.

mod dpo;
mod rm;
mod sft;

pub use dpo::{
    dpo_loss, dpo_loss_var, dpo_pairs, dpo_train, mean_score_per_rank, select_dispreferred_rank, DispreferredSelection,
    DpoItem, DpoOutcome, DpoPairBatch,
};
pub use rm::{bt_loss_var, rm_loss, rm_loss_value, rm_train, RmOutcome};
pub use sft::{next_token_targets, rs_examples, rs_train, sequence_logprobs, sft_loss, sft_train};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CheckpointError, ModelError, Transformer};
use crate::numcore::{AdamW, AdamWConfig, LrSchedule, NumError, ScheduleKind, Tape, Var, Warmup};
use crate::sampling::SamplingError;
use crate::seeding::{derive_seed, rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training set")]
    EmptyData,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("rank {rank} outside pool of {pool}")]
    RankOutOfRange { rank: usize, pool: usize },
    #[error("numeric fault at step {step}: {source}")]
    Numeric {
        step: usize,
        source: NumError,
        /// Parameters before the failing step.
        last_good: Box<Transformer>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Sft,
    Rm,
    Rs,
    Dpo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: StageKind,
    pub epochs: usize,
    pub peak_lr: f64,
    pub schedule: ScheduleKind,
    pub warmup: Warmup,
    pub floor_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when absent.
    pub max_grad_norm: Option<f64>,
    pub dpo_beta: f64,
    /// Divide DPO sequence log-probabilities by response length.
    pub dpo_length_normalize: bool,
    pub dpo_probe_prompts: usize,
    pub rs_rank_k: usize,
    pub rs_pool_n: usize,
}

impl TrainConfig {
    pub fn sft() -> Self {
        Self {
            stage: StageKind::Sft,
            epochs: 3,
            peak_lr: 2e-5,
            schedule: ScheduleKind::Cosine,
            warmup: Warmup::Steps(0),
            floor_lr: 0.0,
            batch_size: 32,
            seed: 0,
            max_grad_norm: None,
            dpo_beta: 0.1,
            dpo_length_normalize: false,
            dpo_probe_prompts: 500,
            rs_rank_k: 1,
            rs_pool_n: 64,
        }
    }

    pub fn rm() -> Self {
        Self {
            stage: StageKind::Rm,
            epochs: 1,
            peak_lr: 1e-5,
            warmup: Warmup::Fraction(0.03),
            batch_size: 256,
            ..Self::sft()
        }
    }

    /// SFT settings with the lower learning rate.
    pub fn rs() -> Self {
        Self { stage: StageKind::Rs, peak_lr: 1e-5, ..Self::sft() }
    }

    pub fn dpo() -> Self {
        Self {
            stage: StageKind::Dpo,
            epochs: 2,
            peak_lr: 5e-7,
            schedule: ScheduleKind::Linear,
            warmup: Warmup::Steps(100),
            ..Self::sft()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.peak_lr > 0.0) || !(self.floor_lr >= 0.0) || self.floor_lr > self.peak_lr {
            return bad(format!("learning rates peak={} floor={}", self.peak_lr, self.floor_lr));
        }
        if !(self.dpo_beta > 0.0) {
            return bad(format!("dpo_beta {}", self.dpo_beta));
        }
        if self.rs_rank_k == 0 || self.rs_rank_k > self.rs_pool_n {
            return bad(format!("rs_rank_k {} with pool {}", self.rs_rank_k, self.rs_pool_n));
        }
        if let Warmup::Fraction(f) = self.warmup {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("warmup fraction {f}"));
            }
        }
        Ok(())
    }

    pub fn steps_for(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }

    pub fn schedule_for(&self, n: usize) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            peak_lr: self.peak_lr,
            warmup: self.warmup,
            total_steps: self.steps_for(n).max(1),
            floor_lr: self.floor_lr,
        }
    }
}

/// One optimizer step of a training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Example order for one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(derive_seed(&[seed, 0xE90C, epoch as u64])));
    idx
}

/// Shuffled minibatch loop shared by all stages. `loss_fn` records the loss
/// of the given example indices on a fresh tape.
pub(crate) fn run_epochs<F>(
    net: &mut Transformer,
    n: usize,
    cfg: &TrainConfig,
    mut loss_fn: F,
) -> Result<Vec<StepLog>, TrainError>
where
    F: FnMut(&Transformer, &[usize], &mut Tape<f32>) -> Result<Var, TrainError>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(TrainError::EmptyData);
    }
    let schedule = cfg.schedule_for(n);
    let mut opt = AdamW::new(&net.params, AdamWConfig::default());
    let mut log = Vec::with_capacity(schedule.total_steps);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let perm = epoch_permutation(n, cfg.seed, epoch);
        for batch in perm.chunks(cfg.batch_size) {
            let fault = |source: NumError, net: &Transformer| TrainError::Numeric {
                step,
                source,
                last_good: Box::new(net.clone()),
            };
            let lr = schedule.lr_at(step)?;
            let mut tape = Tape::new();
            let loss = match loss_fn(net, batch, &mut tape) {
                Ok(v) => v,
                Err(TrainError::Model(ModelError::Num(e))) | Err(TrainError::Num(e)) => return Err(fault(e, net)),
                Err(e) => return Err(e),
            };
            let loss_value = tape.value(loss).item()? as f64;
            let grads = tape.backward(loss).map_err(|e| fault(e, net))?;
            net.params.zero_grad();
            grads.accumulate_into(&tape, &mut net.params);
            let grad_norm = match cfg.max_grad_norm {
                Some(max) => net.params.clip_grad_norm(max),
                None => net.params.grad_norm(),
            };
            if let Err(e) = opt.step(&mut net.params, lr) {
                return Err(fault(e, net));
            }
            log.push(StepLog { step, lr, loss: loss_value, grad_norm });
            step += 1;
        }
    }
    for t in net.params.iter_mut() {
        t.clear_grad();
    }
    Ok(log)
}

/// Training log as JSON lines.
pub fn log_to_jsonl(log: &[StepLog]) -> String {
    log.iter().map(|l| serde_json::to_string(l).expect("log serializes") + "\n").collect()
}
