use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    eval_gen, policy_of, reward_of, train_dpo_with, train_rs_with, train_sft, win_rate, DataShards, PipelineConfig,
    PipelineError,
};
use crate::datasets::RankedRecord;
use crate::eval::{bench_pools, curve_from_pools, sampled_scores, score_pools, Benchmark, ScoreHistogram, Selector};
use crate::model::{Checkpoint, Stage};
use crate::trainers::mean_score_per_rank;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    DataScale,
    RankAblation,
    PoolSizeAblation,
    RejectSelection,
    Upperbound,
    ScoreHist,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::DataScale,
        ExperimentKind::RankAblation,
        ExperimentKind::PoolSizeAblation,
        ExperimentKind::RejectSelection,
        ExperimentKind::Upperbound,
        ExperimentKind::ScoreHist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::DataScale => "data_scale",
            ExperimentKind::RankAblation => "rank_ablation",
            ExperimentKind::PoolSizeAblation => "pool_size_ablation",
            ExperimentKind::RejectSelection => "reject_selection",
            ExperimentKind::Upperbound => "upperbound",
            ExperimentKind::ScoreHist => "score_hist",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn csv_name(self) -> &'static str {
        match self {
            ExperimentKind::DataScale => "fig_data_scale.csv",
            ExperimentKind::RankAblation | ExperimentKind::PoolSizeAblation => "fig_best_of_n_top_n.csv",
            ExperimentKind::RejectSelection => "fig_reject_selection.csv",
            ExperimentKind::Upperbound => "fig_upperbound.csv",
            ExperimentKind::ScoreHist => "fig_score_hist.csv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataScaleRow {
    pub turns: usize,
    pub log2_turns: f64,
    pub steps: usize,
    pub win_rate: f64,
    pub mean_oracle_reward: f64,
}

/// SFT on growing prefixes of the SFT shard.
pub fn data_scale(
    cfg: &PipelineConfig,
    data: &DataShards,
    bench: &Benchmark,
) -> Result<Vec<DataScaleRow>, PipelineError> {
    let mut rows = Vec::new();
    for &n in &cfg.experiments.scale_turns {
        let n = n.min(data.sft.len());
        let (ckpt, log) = train_sft(cfg, &data.sft[..n])?;
        let w = win_rate(cfg, &ckpt, bench)?;
        rows.push(DataScaleRow {
            turns: n,
            log2_turns: (n as f64).log2(),
            steps: log.len(),
            win_rate: w.win_rate,
            mean_oracle_reward: w.mean_oracle_reward,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub sweep: String,
    pub rank: usize,
    pub pool_n: usize,
    pub win_rate: f64,
    pub mean_oracle_reward: f64,
}

fn rs_row(
    cfg: &PipelineConfig,
    sft: &Checkpoint,
    set: &[RankedRecord],
    bench: &Benchmark,
    sweep: &str,
    rank: usize,
    pool_n: usize,
) -> Result<RankRow, PipelineError> {
    let (ckpt, _) = train_rs_with(cfg, sft, set, rank, pool_n)?;
    let w = win_rate(cfg, &ckpt, bench)?;
    Ok(RankRow { sweep: sweep.into(), rank, pool_n, win_rate: w.win_rate, mean_oracle_reward: w.mean_oracle_reward })
}

/// RS finetuning on the rank-`k` response of the full pool, for each
/// ablation rank.
pub fn rank_ablation(
    cfg: &PipelineConfig,
    sft: &Checkpoint,
    set: &[RankedRecord],
    bench: &Benchmark,
) -> Result<Vec<RankRow>, PipelineError> {
    cfg.ablation_ranks().into_iter().map(|k| rs_row(cfg, sft, set, bench, "rank", k, cfg.set.pool_n)).collect()
}

pub type PoolRow = RankRow;

/// RS finetuning on the best of the first `n` pool candidates, reusing the
/// stored pools.
pub fn pool_size_ablation(
    cfg: &PipelineConfig,
    sft: &Checkpoint,
    set: &[RankedRecord],
    bench: &Benchmark,
) -> Result<Vec<PoolRow>, PipelineError> {
    cfg.experiments.pool_sizes.iter().map(|&n| rs_row(cfg, sft, set, bench, "pool", 1, n)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectRow {
    pub rank: usize,
    pub offset: i64,
    pub selected: bool,
    pub win_rate: f64,
    pub heldout_accuracy: f64,
    pub heldout_mean_margin: f64,
}

/// DPO with the dispreferred rank at the selection and at `±offset`
/// around it, clamped to the pool.
pub fn reject_selection(
    cfg: &PipelineConfig,
    rs: &Checkpoint,
    set: &[RankedRecord],
    selected: usize,
    bench: &Benchmark,
) -> Result<Vec<RejectRow>, PipelineError> {
    let n = cfg.set.pool_n;
    let d = cfg.experiments.reject_offset;
    let mut ranks = vec![selected.saturating_sub(d).max(2), selected.clamp(2, n), (selected + d).min(n)];
    ranks.dedup();
    let mut rows = Vec::new();
    for rank in ranks {
        let (ckpt, out) = train_dpo_with(cfg, rs, set, rank)?;
        let w = win_rate(cfg, &ckpt, bench)?;
        rows.push(RejectRow {
            rank,
            offset: rank as i64 - selected as i64,
            selected: rank == selected.clamp(2, n),
            win_rate: w.win_rate,
            heldout_accuracy: out.heldout_accuracy,
            heldout_mean_margin: out.heldout_mean_margin,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpperboundRow {
    pub stage: Stage,
    pub n: usize,
    pub win_rate: f64,
    pub mean_score: f64,
    pub mean_oracle_reward: f64,
}

/// Best-of-1 and best-of-`pool_n` (reward-model selected) win rates for
/// each stage checkpoint.
pub fn upperbound(
    cfg: &PipelineConfig,
    stages: &[&Checkpoint],
    bench: &Benchmark,
    rm: &Checkpoint,
) -> Result<Vec<UpperboundRow>, PipelineError> {
    let rm = reward_of(rm)?;
    let gen = eval_gen(cfg);
    let n = cfg.set.pool_n;
    let mut rows = Vec::new();
    for ckpt in stages {
        let policy = policy_of(ckpt)?;
        let pools = bench_pools(&policy, bench, n, &gen)?;
        let scores = score_pools(bench, &pools, Selector::Rm(&rm))?;
        for p in curve_from_pools(bench, &pools, &scores, &[1, n]) {
            rows.push(UpperboundRow {
                stage: ckpt.stage,
                n: p.n,
                win_rate: p.win_rate,
                mean_score: p.mean_score,
                mean_oracle_reward: p.mean_oracle_reward,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistRow {
    pub stage: Stage,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

/// Reward-model score histogram of sampled responses for each stage.
pub fn score_hist(
    cfg: &PipelineConfig,
    stages: &[&Checkpoint],
    bench: &Benchmark,
    rm: &Checkpoint,
) -> Result<(Vec<HistRow>, Vec<(Stage, ScoreHistogram)>), PipelineError> {
    let rm = reward_of(rm)?;
    let gen = eval_gen(cfg);
    let edges = ScoreHistogram::uniform_edges(cfg.eval.hist_range[0], cfg.eval.hist_range[1], cfg.eval.hist_bins);
    let (mut rows, mut hists) = (Vec::new(), Vec::new());
    for ckpt in stages {
        let policy = policy_of(ckpt)?;
        let h = ScoreHistogram::new(&sampled_scores(&policy, &rm, bench, &gen)?, &edges);
        for (i, &count) in h.counts.iter().enumerate() {
            rows.push(HistRow { stage: ckpt.stage, bin_lo: h.edges[i], bin_hi: h.edges[i + 1], count });
        }
        hists.push((ckpt.stage, h));
    }
    Ok((rows, hists))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePerRankRow {
    pub rank: usize,
    pub mean_score: f64,
}

pub fn score_per_rank(set: &[RankedRecord]) -> Vec<ScorePerRankRow> {
    mean_score_per_rank(set)
        .into_iter()
        .enumerate()
        .map(|(i, mean_score)| ScorePerRankRow { rank: i + 1, mean_score })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let io = |e: csv::Error| PipelineError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}
