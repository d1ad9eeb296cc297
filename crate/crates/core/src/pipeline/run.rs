use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::experiments::{self, ExperimentKind};
use super::*;
use crate::datasets::{pair_stats, read_jsonl, turns_histogram, write_jsonl};
use crate::digest::{file_sha256, sha256_hex};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::trainers::log_to_jsonl;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageName {
    GenData,
    Sft,
    BuildPairs,
    TrainRm,
    BuildSet,
    Rs,
    Dpo,
    Eval,
}

impl StageName {
    pub const ALL: [StageName; 8] = [
        StageName::GenData,
        StageName::Sft,
        StageName::BuildPairs,
        StageName::TrainRm,
        StageName::BuildSet,
        StageName::Rs,
        StageName::Dpo,
        StageName::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageName::GenData => "gen-data",
            StageName::Sft => "sft",
            StageName::BuildPairs => "build-pairs",
            StageName::TrainRm => "train-rm",
            StageName::BuildSet => "build-set",
            StageName::Rs => "rs",
            StageName::Dpo => "dpo",
            StageName::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Stages whose outputs must exist before this one starts.
    pub fn requires(self) -> &'static [StageName] {
        use StageName::*;
        match self {
            GenData => &[],
            Sft => &[GenData],
            BuildPairs => &[GenData, Sft],
            TrainRm => &[Sft, BuildPairs],
            BuildSet => &[GenData, Sft, TrainRm],
            Rs => &[Sft, TrainRm, BuildSet],
            Dpo => &[Sft, TrainRm, BuildSet, Rs],
            Eval => &[GenData, Sft, TrainRm],
        }
    }
}

fn experiment_requires(kind: ExperimentKind) -> &'static [StageName] {
    use StageName::*;
    match kind {
        ExperimentKind::DataScale => &[GenData, Sft],
        ExperimentKind::RankAblation | ExperimentKind::PoolSizeAblation => &[Sft, TrainRm, BuildSet],
        ExperimentKind::RejectSelection => &[Sft, TrainRm, BuildSet, Rs, Dpo],
        ExperimentKind::Upperbound | ExperimentKind::ScoreHist => &[Sft, TrainRm, Rs, Dpo],
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Path relative to the run root.
    pub path: String,
    pub sha256: String,
}

/// Provenance record written last into every completed stage directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub run_id: String,
    pub seed: u64,
    pub config: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub steps: u64,
    pub wall_clock_secs: f64,
}

pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".lock";

/// File names inside a run root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage_dir(&self, stage: StageName) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn experiment_dir(&self, kind: ExperimentKind) -> PathBuf {
        self.root.join("experiments").join(kind.name())
    }

    pub fn file(&self, stage: StageName, name: &str) -> PathBuf {
        self.stage_dir(stage).join(name)
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    pub fn manifest(&self, dir: &Path) -> Result<Option<RunManifest>, PipelineError> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
        serde_json::from_str(&text).map(Some).map_err(|e| PipelineError::Artifact { path, message: e.to_string() })
    }
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(root: &Path) -> Result<Self, PipelineError> {
        let path = root.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(source) => Err(PipelineError::Io { path, source }),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializes");
    text.push('\n');
    fs::write(path, text).map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Artifact { path: path.to_path_buf(), message: e.to_string() })
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io(path))
}

/// Checks that every prerequisite completed and that its files still match
/// its manifest; returns the verified input digests.
fn verify_inputs(layout: &Layout, stage: &str, requires: &[StageName]) -> Result<Vec<FileDigest>, PipelineError> {
    let mut inputs = Vec::new();
    for &req in requires {
        let dir = layout.stage_dir(req);
        let m = layout
            .manifest(&dir)?
            .ok_or_else(|| PipelineError::StageOrder { stage: stage.into(), missing: req.name().into() })?;
        for f in &m.outputs {
            let path = layout.root.join(&f.path);
            let actual = file_sha256(&path).map_err(io(&path))?;
            if actual != f.sha256 {
                return Err(PipelineError::Digest { stage: req.name().into(), path });
            }
            inputs.push(f.clone());
        }
    }
    Ok(inputs)
}

fn digests(layout: &Layout, dir: &Path) -> Result<Vec<FileDigest>, PipelineError> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST))
        .collect();
    names.sort();
    names.iter().map(|p| Ok(FileDigest { path: layout.relative(p), sha256: file_sha256(p).map_err(io(p))? })).collect()
}

/// Runs `body` into a scratch directory, then records a manifest and moves
/// the directory into place.
fn complete<F>(
    layout: &Layout,
    cfg: &PipelineConfig,
    label: &str,
    dir: &Path,
    requires: &[StageName],
    body: F,
) -> Result<RunManifest, PipelineError>
where
    F: FnOnce(&Path) -> Result<u64, PipelineError>,
{
    fs::create_dir_all(&layout.root).map_err(io(&layout.root))?;
    let _lock = LockGuard::acquire(&layout.root)?;
    if layout.manifest(dir)?.is_some() {
        return Err(PipelineError::AlreadyComplete(label.into()));
    }
    let inputs = verify_inputs(layout, label, requires)?;
    let scratch = dir.with_file_name(format!(".{}.partial", dir.file_name().unwrap().to_string_lossy()));
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(io(&scratch))?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io(dir))?;
    }
    fs::create_dir_all(&scratch).map_err(io(&scratch))?;
    let t = Instant::now();
    let steps = body(&scratch)?;
    fs::rename(&scratch, dir).map_err(io(dir))?;
    let config = cfg.to_toml();
    let outputs = digests(layout, dir)?;
    let id_src = serde_json::to_vec(&(label, &config, &inputs)).expect("serializes");
    let manifest = RunManifest {
        stage: label.into(),
        run_id: sha256_hex(&id_src)[..16].to_string(),
        seed: cfg.seed,
        config,
        inputs,
        outputs,
        steps,
        wall_clock_secs: t.elapsed().as_secs_f64(),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

struct Inputs<'a> {
    layout: &'a Layout,
}

impl Inputs<'_> {
    fn ckpt(&self, stage: StageName, name: &str) -> Result<Checkpoint, PipelineError> {
        Ok(load_checkpoint(&self.layout.file(stage, name))?)
    }

    fn prompts(&self, name: &str) -> Result<Vec<PromptInstance>, PipelineError> {
        Ok(read_jsonl(&self.layout.file(StageName::GenData, name))?)
    }

    fn data(&self) -> Result<DataShards, PipelineError> {
        Ok(DataShards {
            sft_conversations: read_jsonl(&self.layout.file(StageName::GenData, "conversations_sft.jsonl"))?,
            sft: self.prompts("prompts_sft.jsonl")?,
            pairs: self.prompts("prompts_pairs.jsonl")?,
            set: self.prompts("prompts_set.jsonl")?,
            bench: self.prompts("prompts_bench.jsonl")?,
            multiturn: read_jsonl(&self.layout.file(StageName::GenData, "conversations_multiturn.jsonl"))?,
        })
    }

    fn bench(&self) -> Result<Benchmark, PipelineError> {
        let b: Benchmark = read_json(&self.layout.file(StageName::Sft, "benchmark.json"))?;
        b.verify()?;
        Ok(b)
    }

    fn set(&self) -> Result<Vec<RankedRecord>, PipelineError> {
        Ok(read_jsonl(&self.layout.file(StageName::BuildSet, "set.jsonl"))?)
    }
}

#[derive(Serialize)]
struct DataStats {
    sft_examples: usize,
    sft_conversations: usize,
    sft_turns_histogram: std::collections::BTreeMap<usize, usize>,
    pair_prompts: usize,
    set_prompts: usize,
    bench_prompts: usize,
    multiturn_conversations: usize,
}

/// Runs one pipeline stage under `root`, writing its outputs and manifest
/// into `root/<stage>/`.
pub fn run_stage(root: &Path, cfg: &PipelineConfig, stage: StageName) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let layout = Layout::new(root);
    let inp = Inputs { layout: &layout };
    let dir = layout.stage_dir(stage);
    complete(&layout, cfg, stage.name(), &dir, stage.requires(), |out| match stage {
        StageName::GenData => {
            let d = gen_data(cfg)?;
            write_jsonl(&out.join("conversations_sft.jsonl"), &d.sft_conversations)?;
            write_jsonl(&out.join("prompts_sft.jsonl"), &d.sft)?;
            write_jsonl(&out.join("prompts_pairs.jsonl"), &d.pairs)?;
            write_jsonl(&out.join("prompts_set.jsonl"), &d.set)?;
            write_jsonl(&out.join("prompts_bench.jsonl"), &d.bench)?;
            write_jsonl(&out.join("conversations_multiturn.jsonl"), &d.multiturn)?;
            let stats = DataStats {
                sft_examples: d.sft.len(),
                sft_conversations: d.sft_conversations.len(),
                sft_turns_histogram: turns_histogram(&d.sft_conversations),
                pair_prompts: d.pairs.len(),
                set_prompts: d.set.len(),
                bench_prompts: d.bench.len(),
                multiturn_conversations: d.multiturn.len(),
            };
            write_json(&out.join("stats.json"), &stats)?;
            Ok(0)
        }
        StageName::Sft => {
            let d = inp.data()?;
            let reference = train_reference(cfg, &d)?;
            let bench = build_benchmark(cfg, &reference, &d)?;
            let (sft, log) = train_sft(cfg, &d.sft)?;
            save_checkpoint(&reference, &out.join("reference.ckpt"))?;
            save_checkpoint(&sft, &out.join("sft.ckpt"))?;
            write_json(&out.join("benchmark.json"), &bench)?;
            write_text(&out.join("sft_log.jsonl"), &log_to_jsonl(&log))?;
            Ok(log.len() as u64)
        }
        StageName::BuildPairs => {
            let sft = inp.ckpt(StageName::Sft, "sft.ckpt")?;
            let (pairs, report) = build_pairs(cfg, &sft, &inp.prompts("prompts_pairs.jsonl")?)?;
            write_jsonl(&out.join("pairs.jsonl"), &pairs)?;
            write_json(&out.join("pair_stats.json"), &(pair_stats(&pairs), report))?;
            Ok(0)
        }
        StageName::TrainRm => {
            let sft = inp.ckpt(StageName::Sft, "sft.ckpt")?;
            let pairs: Vec<PreferencePair> = read_jsonl(&layout.file(StageName::BuildPairs, "pairs.jsonl"))?;
            let (rm, outcome) = train_rm(cfg, &sft, &pairs)?;
            save_checkpoint(&rm, &out.join("rm.ckpt"))?;
            write_text(&out.join("rm_log.jsonl"), &log_to_jsonl(&outcome.log))?;
            write_json(&out.join("rm_report.json"), &RmSummary::from(&outcome))?;
            Ok(outcome.log.len() as u64)
        }
        StageName::BuildSet => {
            let sft = inp.ckpt(StageName::Sft, "sft.ckpt")?;
            let rm = inp.ckpt(StageName::TrainRm, "rm.ckpt")?;
            let set = build_set(cfg, &sft, &rm, &inp.prompts("prompts_set.jsonl")?)?;
            write_jsonl(&out.join("set.jsonl"), &set)?;
            write_csv(&out.join("fig_score_per_rank.csv"), &experiments::score_per_rank(&set))?;
            Ok(0)
        }
        StageName::Rs => {
            let sft = inp.ckpt(StageName::Sft, "sft.ckpt")?;
            let (rs, log) = train_rs(cfg, &sft, &inp.set()?)?;
            save_checkpoint(&rs, &out.join("rs.ckpt"))?;
            write_text(&out.join("rs_log.jsonl"), &log_to_jsonl(&log))?;
            Ok(log.len() as u64)
        }
        StageName::Dpo => {
            let rs = inp.ckpt(StageName::Rs, "rs.ckpt")?;
            let rm = inp.ckpt(StageName::TrainRm, "rm.ckpt")?;
            let (dpo, report) = train_dpo(cfg, &rs, &inp.set()?, &rm)?;
            save_checkpoint(&dpo, &out.join("dpo.ckpt"))?;
            write_text(&out.join("dpo_log.jsonl"), &log_to_jsonl(&report.outcome.log))?;
            let mut summary = report.clone();
            summary.outcome.log.clear();
            write_json(&out.join("dpo_report.json"), &summary)?;
            Ok(report.outcome.log.len() as u64)
        }
        StageName::Eval => {
            let d = inp.data()?;
            let bench = inp.bench()?;
            let rm = inp.ckpt(StageName::TrainRm, "rm.ckpt")?;
            let mut reports = Vec::new();
            for (stage, name) in
                [(StageName::Sft, "sft.ckpt"), (StageName::Rs, "rs.ckpt"), (StageName::Dpo, "dpo.ckpt")]
            {
                if stage != StageName::Sft && layout.manifest(&layout.stage_dir(stage))?.is_none() {
                    continue;
                }
                let ckpt = inp.ckpt(stage, name)?;
                reports.push(evaluate(cfg, &ckpt, &bench, &rm, &d.multiturn)?);
            }
            write_json(&out.join("eval_report.json"), &reports)?;
            let curve: Vec<BestOfNRow> = reports
                .iter()
                .flat_map(|r| {
                    r.best_of_n.iter().zip(&r.oracle_best_of_n).map(move |(p, o)| BestOfNRow {
                        stage: r.stage,
                        n: p.n,
                        rm_win_rate: p.win_rate,
                        rm_mean_score: p.mean_score,
                        oracle_win_rate: o.win_rate,
                    })
                })
                .collect();
            write_csv(&out.join("fig_rm_best_of_n.csv"), &curve)?;
            let hist: Vec<HistRow> = reports
                .iter()
                .flat_map(|r| {
                    let h = &r.score_histogram;
                    h.counts.iter().enumerate().map(move |(i, &count)| HistRow {
                        stage: r.stage,
                        bin_lo: h.edges[i],
                        bin_hi: h.edges[i + 1],
                        count,
                    })
                })
                .collect();
            write_csv(&out.join("fig_score_hist.csv"), &hist)?;
            Ok(0)
        }
    })
}

#[derive(Serialize)]
struct BestOfNRow {
    stage: crate::model::Stage,
    n: usize,
    rm_win_rate: f64,
    rm_mean_score: f64,
    oracle_win_rate: f64,
}

#[derive(Serialize)]
struct RmSummary<'a> {
    final_train_loss: f64,
    steps: usize,
    val: &'a crate::eval::GranularAccuracy,
}

impl<'a> From<&'a RmOutcome> for RmSummary<'a> {
    fn from(o: &'a RmOutcome) -> Self {
        RmSummary { final_train_loss: o.final_train_loss, steps: o.log.len(), val: &o.val }
    }
}

/// Runs one figure experiment under `root/experiments/<name>/`.
pub fn run_experiment(root: &Path, cfg: &PipelineConfig, kind: ExperimentKind) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let layout = Layout::new(root);
    let inp = Inputs { layout: &layout };
    let dir = layout.experiment_dir(kind);
    fs::create_dir_all(dir.parent().unwrap()).map_err(io(root))?;
    let label = format!("experiment {}", kind.name());
    complete(&layout, cfg, &label, &dir, experiment_requires(kind), |out| {
        let csv = out.join(kind.csv_name());
        let summary = out.join("summary.json");
        match kind {
            ExperimentKind::DataScale => {
                let rows = data_scale(cfg, &inp.data()?, &inp.bench()?)?;
                write_csv(&csv, &rows)?;
                write_json(&summary, &rows)?;
            }
            ExperimentKind::RankAblation | ExperimentKind::PoolSizeAblation => {
                let sft = inp.ckpt(StageName::Sft, "sft.ckpt")?;
                let (set, bench) = (inp.set()?, inp.bench()?);
                let rows = if kind == ExperimentKind::RankAblation {
                    rank_ablation(cfg, &sft, &set, &bench)?
                } else {
                    pool_size_ablation(cfg, &sft, &set, &bench)?
                };
                write_csv(&csv, &rows)?;
                write_json(&summary, &rows)?;
            }
            ExperimentKind::RejectSelection => {
                let rs = inp.ckpt(StageName::Rs, "rs.ckpt")?;
                let report: DpoReport = read_json(&layout.file(StageName::Dpo, "dpo_report.json"))?;
                let rows = reject_selection(cfg, &rs, &inp.set()?, report.outcome.rejected_rank, &inp.bench()?)?;
                write_csv(&csv, &rows)?;
                write_json(&summary, &(report.selection, &rows))?;
            }
            ExperimentKind::Upperbound | ExperimentKind::ScoreHist => {
                let ckpts = [
                    inp.ckpt(StageName::Sft, "sft.ckpt")?,
                    inp.ckpt(StageName::Rs, "rs.ckpt")?,
                    inp.ckpt(StageName::Dpo, "dpo.ckpt")?,
                ];
                let stages: Vec<&Checkpoint> = ckpts.iter().collect();
                let rm = inp.ckpt(StageName::TrainRm, "rm.ckpt")?;
                let bench = inp.bench()?;
                if kind == ExperimentKind::Upperbound {
                    let rows = upperbound(cfg, &stages, &bench, &rm)?;
                    write_csv(&csv, &rows)?;
                    write_json(&summary, &rows)?;
                } else {
                    let (rows, hists) = score_hist(cfg, &stages, &bench, &rm)?;
                    write_csv(&csv, &rows)?;
                    write_json(&summary, &hists)?;
                }
            }
        }
        Ok(0)
    })
}
