//! Stage orchestration: configuration, in-memory stage functions, figure
//! experiments and on-disk run directories.

mod config;
mod experiments;
mod run;

pub use config::{
    DataSection, DpoSection, EvalSection, ExperimentSection, ModelSection, PairsSection, PipelineConfig, RsSection,
    SetSection, StageSection,
};
pub use experiments::{
    data_scale, pool_size_ablation, rank_ablation, reject_selection, score_hist, score_per_rank, upperbound, write_csv,
    DataScaleRow, ExperimentKind, HistRow, PoolRow, RankRow, RejectRow, ScorePerRankRow, UpperboundRow,
};
pub use run::{run_experiment, run_stage, FileDigest, Layout, RunManifest, StageName};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{
    build_pair_dataset, build_ranked_set, filter_min_rating, sft_examples, unfold_all, Conversation, JsonlError,
    PairBuildReport, PreferencePair, PromptInstance, RankedRecord, Split,
};
use crate::eval::{
    bench_pools, curve_from_pools, eval_multiturn, eval_winrate, sampled_scores, score_pools,
    score_winrate_correlation, Benchmark, CurvePoint, EvalError, MultiTurnReport, ScoreHistogram, Selector, WinRate,
};
use crate::model::{Checkpoint, CheckpointError, ModelError, PolicyModel, RewardModel, Stage};
use crate::sampling::{GenParams, SamplingError};
use crate::seeding::{derive_seed, mix64};
use crate::taskgen::{conversation_at, TaskError};
use crate::trainers::{
    dpo_train, rm_train, rs_train, select_dispreferred_rank, sft_train, DispreferredSelection, DpoOutcome, RmOutcome,
    StageKind, StepLog, TrainError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("stage {stage} requires {missing}, which has not completed")]
    StageOrder { stage: String, missing: String },
    #[error("stage {0} already completed in this run directory")]
    AlreadyComplete(String),
    #[error("{path}: digest mismatch against manifest of stage {stage}")]
    Digest { stage: String, path: PathBuf },
    #[error("run directory is locked by {0}")]
    Locked(PathBuf),
    #[error("malformed artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("data generation: {0}")]
    Task(#[from] TaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

impl PipelineError {
    /// Stable identifier for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Io { .. } => "io",
            PipelineError::StageOrder { .. } => "stage_order",
            PipelineError::AlreadyComplete(_) => "already_complete",
            PipelineError::Digest { .. } => "digest_mismatch",
            PipelineError::Locked(_) => "locked",
            PipelineError::Artifact { .. } => "artifact",
            PipelineError::Task(_) => "data",
            PipelineError::Train(_) => "train",
            PipelineError::Eval(EvalError::DigestMismatch { .. }) => "digest_mismatch",
            PipelineError::Eval(_) => "eval",
            PipelineError::Sampling(_) => "sampling",
            PipelineError::Model(_) => "model",
            PipelineError::Checkpoint(CheckpointError::DigestMismatch) => "digest_mismatch",
            PipelineError::Checkpoint(_) => "checkpoint",
            PipelineError::Jsonl(_) => "jsonl",
        }
    }
}

// Seed-derivation tags, one per consumer.
const TAG_DATA: u64 = 0xDA7A;
const TAG_MULTITURN: u64 = 0x3A7;
const TAG_INIT: u64 = 0x1417;
const TAG_REF_INIT: u64 = 0x4EF1;
const TAG_SFT: u64 = 0x5F7;
const TAG_PAIRS: u64 = 0x9A15;
const TAG_RM: u64 = 0x4A;
const TAG_SET: u64 = 0x5E7;
const TAG_RS: u64 = 0x45;
const TAG_DPO: u64 = 0xD90;
const TAG_PROBE: u64 = 0x9406;
const TAG_EVAL: u64 = 0xE7A1;

pub fn stage_seed(seed: u64, tag: u64) -> u64 {
    derive_seed(&[seed, tag])
}

/// Which prompt pool a conversation belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shard {
    Sft,
    Rm,
    Rs,
    Bench,
}

impl Shard {
    /// Hash partition of conversation ids.
    pub fn of(conversation_id: u64) -> Shard {
        match mix64(conversation_id ^ 0x5A4D_0000_0000_0001) % 4 {
            0 => Shard::Sft,
            1 => Shard::Rm,
            2 => Shard::Rs,
            _ => Shard::Bench,
        }
    }
}

/// Disjoint prompt pools drawn from one seeded conversation stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataShards {
    pub sft_conversations: Vec<Conversation>,
    pub sft: Vec<PromptInstance>,
    pub pairs: Vec<PromptInstance>,
    pub set: Vec<PromptInstance>,
    pub bench: Vec<PromptInstance>,
    /// Multi-turn conversations from the benchmark pool.
    pub multiturn: Vec<Conversation>,
}

pub fn gen_data(cfg: &PipelineConfig) -> Result<DataShards, PipelineError> {
    cfg.validate()?;
    let d = &cfg.data;
    let tg = cfg.taskgen();
    let seed = stage_seed(cfg.seed, TAG_DATA);
    let (mut sft_conversations, mut sft, mut pairs, mut set, mut bench) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let total = d.sft_turns + d.pair_prompts + d.set_prompts + d.bench_prompts;
    let limit = 64 * total + 1024;
    let mut i = 0;
    while sft.len() < d.sft_turns
        || pairs.len() < d.pair_prompts
        || set.len() < d.set_prompts
        || bench.len() < d.bench_prompts
    {
        if i >= limit {
            return Err(PipelineError::Config("token budget too small to fill the data shards".into()));
        }
        let conv = conversation_at(i, cfg.turns_range(), &tg, seed);
        i += 1;
        let one = std::slice::from_ref(&conv);
        match Shard::of(conv.id) {
            Shard::Sft if sft.len() < d.sft_turns => {
                sft.extend(sft_examples(one, d.block_tokens));
                sft_conversations.push(conv);
            }
            Shard::Rm if pairs.len() < d.pair_prompts => pairs.extend(unfold_all(one, d.block_tokens)),
            Shard::Rs if set.len() < d.set_prompts => set.extend(unfold_all(one, d.block_tokens)),
            Shard::Bench if bench.len() < d.bench_prompts => bench.extend(unfold_all(one, d.block_tokens)),
            _ => {}
        }
    }
    sft.truncate(d.sft_turns);
    pairs.truncate(d.pair_prompts);
    set.truncate(d.set_prompts);
    bench.truncate(d.bench_prompts);
    let mut multiturn = Vec::with_capacity(d.multiturn_conversations);
    let mt_seed = stage_seed(cfg.seed, TAG_MULTITURN);
    let mut j = 0;
    while multiturn.len() < d.multiturn_conversations && j < 64 * d.multiturn_conversations + 64 {
        let conv = conversation_at(j, (2, 3), &tg, mt_seed);
        j += 1;
        if Shard::of(conv.id) == Shard::Bench {
            multiturn.push(conv);
        }
    }
    Ok(DataShards { sft_conversations, sft, pairs, set, bench, multiturn })
}

fn policy_of(ckpt: &Checkpoint) -> Result<PolicyModel, PipelineError> {
    Ok(PolicyModel::try_from(ckpt.net.clone())?)
}

fn reward_of(ckpt: &Checkpoint) -> Result<RewardModel, PipelineError> {
    ckpt.expect_stage(&[Stage::Rm])?;
    Ok(RewardModel::try_from(ckpt.net.clone())?)
}

fn checkpoint(net: crate::model::Transformer, stage: Stage, seed: u64, log: &[StepLog]) -> Checkpoint {
    Checkpoint { net, stage, seed, steps: log.len() as u64 }
}

/// SFT from a fresh initialization on `examples`.
pub fn train_sft(
    cfg: &PipelineConfig,
    examples: &[PromptInstance],
) -> Result<(Checkpoint, Vec<StepLog>), PipelineError> {
    let base = PolicyModel::new(cfg.transformer(), stage_seed(cfg.seed, TAG_INIT))?;
    let tc = cfg.sft.train_config(StageKind::Sft, stage_seed(cfg.seed, TAG_SFT));
    let (policy, log) = sft_train(&base, examples, &tc)?;
    Ok((checkpoint(policy.net, Stage::Sft, cfg.seed, &log), log))
}

/// The frozen benchmark reference: SFT on the first `reference_turns`
/// examples of the SFT shard.
pub fn train_reference(cfg: &PipelineConfig, data: &DataShards) -> Result<Checkpoint, PipelineError> {
    let n = cfg.data.reference_turns.min(data.sft.len());
    let base = PolicyModel::new(cfg.transformer(), stage_seed(cfg.seed, TAG_REF_INIT))?;
    let tc = cfg.sft.train_config(StageKind::Sft, stage_seed(cfg.seed, TAG_REF_INIT));
    let (policy, log) = sft_train(&base, &data.sft[..n], &tc)?;
    Ok(checkpoint(policy.net, Stage::Sft, cfg.seed, &log))
}

/// Sampling parameters shared by the benchmark references and every
/// evaluation, so that a policy evaluated against itself ties exactly.
pub fn eval_gen(cfg: &PipelineConfig) -> GenParams {
    cfg.eval_gen().with_seed(stage_seed(cfg.seed, TAG_EVAL))
}

pub fn build_benchmark(
    cfg: &PipelineConfig,
    reference: &Checkpoint,
    data: &DataShards,
) -> Result<Benchmark, PipelineError> {
    let policy = policy_of(reference)?;
    Ok(Benchmark::new(data.bench.clone(), &policy, reference.digest_hex(), &eval_gen(cfg))?)
}

pub fn build_pairs(
    cfg: &PipelineConfig,
    sft: &Checkpoint,
    prompts: &[PromptInstance],
) -> Result<(Vec<PreferencePair>, PairBuildReport), PipelineError> {
    sft.expect_stage(&[Stage::Sft])?;
    let policy = policy_of(sft)?;
    let (pairs, report) = build_pair_dataset(prompts, &policy, &cfg.pair_build(stage_seed(cfg.seed, TAG_PAIRS)));
    if pairs.is_empty() {
        return Err(PipelineError::Train(TrainError::EmptyData));
    }
    Ok((pairs, report))
}

/// Reward model on the train split; with `pairs.min_rating` set, weaker
/// train pairs are dropped while validation keeps every pair.
pub fn train_rm(
    cfg: &PipelineConfig,
    sft: &Checkpoint,
    pairs: &[PreferencePair],
) -> Result<(Checkpoint, RmOutcome), PipelineError> {
    let tc = cfg.rm.train_config(StageKind::Rm, stage_seed(cfg.seed, TAG_RM));
    let kept: Vec<PreferencePair>;
    let pairs = match cfg.pairs.min_rating {
        Some(r) => {
            let (train, val): (Vec<_>, Vec<_>) = pairs.iter().cloned().partition(|p| p.split == Split::Train);
            kept = filter_min_rating(train, r).into_iter().chain(val).collect();
            &kept[..]
        }
        None => pairs,
    };
    let mut out = rm_train(sft, pairs, &tc)?;
    let rm = out.rm.take().expect("trained model present");
    Ok((checkpoint(rm.net, Stage::Rm, cfg.seed, &out.log), out))
}

pub fn build_set(
    cfg: &PipelineConfig,
    sft: &Checkpoint,
    rm: &Checkpoint,
    prompts: &[PromptInstance],
) -> Result<Vec<RankedRecord>, PipelineError> {
    sft.expect_stage(&[Stage::Sft])?;
    let policy = policy_of(sft)?;
    let rm = reward_of(rm)?;
    Ok(build_ranked_set(prompts, &policy, &rm, &cfg.ranked_build(stage_seed(cfg.seed, TAG_SET)))?)
}

/// RS finetuning with explicit rank and pool size.
pub fn train_rs_with(
    cfg: &PipelineConfig,
    sft: &Checkpoint,
    set: &[RankedRecord],
    rank_k: usize,
    pool_n: usize,
) -> Result<(Checkpoint, Vec<StepLog>), PipelineError> {
    let tc = crate::trainers::TrainConfig {
        rs_rank_k: rank_k,
        rs_pool_n: pool_n,
        ..cfg.rs_train(stage_seed(cfg.seed, TAG_RS))
    };
    let (policy, log) = rs_train(sft, set, &tc)?;
    Ok((checkpoint(policy.net, Stage::Rs, cfg.seed, &log), log))
}

pub fn train_rs(
    cfg: &PipelineConfig,
    sft: &Checkpoint,
    set: &[RankedRecord],
) -> Result<(Checkpoint, Vec<StepLog>), PipelineError> {
    train_rs_with(cfg, sft, set, cfg.rs.rank_k, cfg.rs.pool_n)
}

/// Score-matched dispreferred rank for the RS policy.
pub fn select_rank(
    cfg: &PipelineConfig,
    rs: &Checkpoint,
    set: &[RankedRecord],
    rm: &Checkpoint,
) -> Result<DispreferredSelection, PipelineError> {
    let policy = policy_of(rs)?;
    let rm = reward_of(rm)?;
    let seed = stage_seed(cfg.seed, TAG_PROBE);
    Ok(select_dispreferred_rank(&policy, set, cfg.dpo.probe_prompts, &rm, &cfg.set_gen(), seed)?)
}

pub fn train_dpo_with(
    cfg: &PipelineConfig,
    rs: &Checkpoint,
    set: &[RankedRecord],
    rejected_rank: usize,
) -> Result<(Checkpoint, DpoOutcome), PipelineError> {
    let tc = cfg.dpo_train(stage_seed(cfg.seed, TAG_DPO));
    let mut out = dpo_train(rs, set, rejected_rank, &tc)?;
    let policy = out.policy.take().expect("trained policy present");
    Ok((checkpoint(policy.net, Stage::Dpo, cfg.seed, &out.log), out))
}

/// DPO outcome together with the rank selection that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub selection: Option<DispreferredSelection>,
    pub outcome: DpoOutcome,
}

pub fn train_dpo(
    cfg: &PipelineConfig,
    rs: &Checkpoint,
    set: &[RankedRecord],
    rm: &Checkpoint,
) -> Result<(Checkpoint, DpoReport), PipelineError> {
    let (rank, selection) = match cfg.dpo.rejected_rank {
        Some(r) => (r, None),
        None => {
            let s = select_rank(cfg, rs, set, rm)?;
            (s.rank.max(2), Some(s))
        }
    };
    let (ckpt, outcome) = train_dpo_with(cfg, rs, set, rank)?;
    Ok((ckpt, DpoReport { selection, outcome }))
}

/// Evaluation of one policy checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: Stage,
    pub checkpoint: String,
    pub benchmark: String,
    pub win_rate: f64,
    pub mean_oracle_reward: f64,
    /// Reward-model-selected best-of-n curve.
    pub best_of_n: Vec<CurvePoint>,
    /// Oracle-selected best-of-n curve.
    pub oracle_best_of_n: Vec<CurvePoint>,
    /// Spearman correlation of mean score and win rate along `best_of_n`.
    pub score_winrate_rho: Option<f64>,
    pub score_histogram: ScoreHistogram,
    pub multiturn: Option<MultiTurnReport>,
}

/// Win rate plus best-of-n curves and the sampled-score histogram.
pub fn evaluate(
    cfg: &PipelineConfig,
    policy_ckpt: &Checkpoint,
    bench: &Benchmark,
    rm: &Checkpoint,
    multiturn: &[Conversation],
) -> Result<EvalReport, PipelineError> {
    bench.verify()?;
    let policy = policy_of(policy_ckpt)?;
    let rm_model = reward_of(rm)?;
    let gen = eval_gen(cfg);
    let WinRate { win_rate, mean_oracle_reward, .. } = eval_winrate(&policy, bench, &gen)?;
    let n_max = cfg.eval.best_of.iter().copied().max().unwrap_or(1);
    let pools = bench_pools(&policy, bench, n_max, &gen)?;
    let rm_scores = score_pools(bench, &pools, Selector::Rm(&rm_model))?;
    let oracle_scores = score_pools(bench, &pools, Selector::Oracle)?;
    let best_of_n = curve_from_pools(bench, &pools, &rm_scores, &cfg.eval.best_of);
    let oracle_best_of_n = curve_from_pools(bench, &pools, &oracle_scores, &cfg.eval.best_of);
    let scores = sampled_scores(&policy, &rm_model, bench, &gen)?;
    let edges = ScoreHistogram::uniform_edges(cfg.eval.hist_range[0], cfg.eval.hist_range[1], cfg.eval.hist_bins);
    let multiturn = if multiturn.is_empty() { None } else { Some(eval_multiturn(&policy, multiturn, &gen)?) };
    Ok(EvalReport {
        stage: policy_ckpt.stage,
        checkpoint: policy_ckpt.digest_hex(),
        benchmark: bench.digest.clone(),
        win_rate,
        mean_oracle_reward,
        score_winrate_rho: score_winrate_correlation(&best_of_n),
        best_of_n,
        oracle_best_of_n,
        score_histogram: ScoreHistogram::new(&scores, &edges),
        multiturn,
    })
}

/// Best-of-1 win rate only.
pub fn win_rate(cfg: &PipelineConfig, policy_ckpt: &Checkpoint, bench: &Benchmark) -> Result<WinRate, PipelineError> {
    let policy = policy_of(policy_ckpt)?;
    Ok(eval_winrate(&policy, bench, &eval_gen(cfg))?)
}

/// Everything the default pipeline produces, held in memory.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub config: PipelineConfig,
    pub data: DataShards,
    pub reference: Checkpoint,
    pub bench: Benchmark,
    pub sft: Checkpoint,
    pub sft_log: Vec<StepLog>,
    pub pairs: Vec<PreferencePair>,
    pub pair_report: PairBuildReport,
    pub rm: Checkpoint,
    pub rm_outcome: RmOutcome,
    pub set: Vec<RankedRecord>,
    pub rs: Checkpoint,
    pub rs_log: Vec<StepLog>,
    pub dpo: Checkpoint,
    pub dpo_report: DpoReport,
}

/// gen-data → sft → build-pairs → train-rm → build-set → rs → dpo.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    let data = gen_data(cfg)?;
    let reference = train_reference(cfg, &data)?;
    let bench = build_benchmark(cfg, &reference, &data)?;
    let (sft, sft_log) = train_sft(cfg, &data.sft)?;
    let (pairs, pair_report) = build_pairs(cfg, &sft, &data.pairs)?;
    let (rm, rm_outcome) = train_rm(cfg, &sft, &pairs)?;
    let set = build_set(cfg, &sft, &rm, &data.set)?;
    let (rs, rs_log) = train_rs(cfg, &sft, &set)?;
    let (dpo, dpo_report) = train_dpo(cfg, &rs, &set, &rm)?;
    Ok(PipelineRun {
        config: cfg.clone(),
        data,
        reference,
        bench,
        sft,
        sft_log,
        pairs,
        pair_report,
        rm,
        rm_outcome,
        set,
        rs,
        rs_log,
        dpo,
        dpo_report,
    })
}
