//! End-to-end acceptance criteria. Run with `--nocapture` to see the
//! per-criterion report:
//!
//! ```text
//! cargo test -p deskalign-core --test acceptance -- --nocapture
//! ```
//!
//! Set `DESKALIGN_ACCEPTANCE_DIR` to keep the run directories.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::LN_2;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::gradcheck::{self, REL_TOL};
use deskalign::datasets::{unfold_all, PromptInstance};
use deskalign::eval::{GranularAccuracy, ScoreHistogram, BEST_OF_NS};
use deskalign::model::Stage;
use deskalign::numcore::{Tape, Tensor};
use deskalign::pipeline::{
    run_experiment, run_stage, EvalReport, ExperimentKind, PipelineConfig, RankRow, RejectRow, RunManifest, StageName,
    UpperboundRow,
};
use deskalign::taskgen::{gen_conversations, Rating, TaskGenConfig};
use deskalign::trainers::{dpo_loss, dpo_loss_var, next_token_targets, rm_loss_value, sft_loss, DpoItem, DpoPairBatch};
use deskalign::{PolicyModel, TransformerConfig};
use serde::de::DeserializeOwned;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &'static str, pass: bool, detail: String) -> Verdict {
    println!("[{}] {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Verdict { id, name, pass, detail }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn read<T: DeserializeOwned>(path: &Path) -> T {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Criteria that need no pipeline run

fn autodiff() -> Verdict {
    let t = Instant::now();
    let reports = gradcheck::run_all();
    let secs = t.elapsed().as_secs_f64();
    let mut by_op: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    for r in &reports {
        let e = by_op.entry(r.op).or_insert((0, 0, 0.0));
        e.0 = e.0.max(r.shape_index + 1);
        e.1 += 1;
        e.2 = e.2.max(r.max_rel_err);
    }
    let (worst_op, worst) =
        by_op.iter().map(|(op, e)| (*op, e.2)).fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let coverage = by_op.values().all(|&(shapes, runs, _)| shapes >= 3 && runs >= shapes * 5);
    let pass = coverage && worst <= REL_TOL && secs < 60.0;
    report(
        1,
        "autodiff vs finite differences",
        pass,
        format!("{} ops x 3 shapes x 5 seeds, worst rel err {worst:.2e} ({worst_op}), {secs:.1}s", by_op.len()),
    )
}

fn loss_oracles() -> Verdict {
    let mut errs: Vec<(String, f64, f64)> = Vec::new();
    errs.push(("rm(0)".into(), (rm_loss_value(0.0) - LN_2).abs(), 1e-7));
    errs.push(("rm(0.5)".into(), (rm_loss_value(0.5) - 0.4740770).abs(), 1e-6));

    for beta in [0.01, 0.1, 1.0] {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::from_vec(vec![-3.0, -7.5, -1.25]));
        let l = tape.leaf(Tensor::from_vec(vec![-4.0, -2.0, -9.0]));
        let loss = dpo_loss_var(&mut tape, w, l, &[1.0, -5.5, 7.75], beta).unwrap();
        errs.push((format!("dpo(beta={beta})"), (tape.value(loss).item().unwrap() - LN_2).abs(), 1e-6));
    }

    // Same check through a real policy acting as its own reference.
    let policy = PolicyModel::new(TransformerConfig::default(), 3).unwrap();
    let items: Vec<DpoItem> = prompts(64, 4)
        .into_iter()
        .map(|p| DpoItem { prompt: p.context.clone(), chosen: p.response.clone(), rejected: p.response[1..].to_vec() })
        .collect();
    let batch = DpoPairBatch::new(&policy, items, false).unwrap();
    for beta in [0.01, 0.1, 1.0] {
        errs.push((format!("dpo model(beta={beta})"), (dpo_loss(&policy, &batch, beta).unwrap() - LN_2).abs(), 1e-6));
    }

    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::from_vec(vec![-2.0]));
    let l = tape.leaf(Tensor::from_vec(vec![-3.0]));
    let loss = dpo_loss_var(&mut tape, w, l, &[0.0], 0.1).unwrap();
    errs.push(("dpo(beta=0.1, margin 1)".into(), (tape.value(loss).item().unwrap() - 0.6443967).abs(), 1e-6));

    let bad: Vec<_> =
        errs.iter().filter(|(_, e, tol)| e > tol).map(|(n, e, _)| format!("{n} off by {e:.1e}")).collect();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail =
        if bad.is_empty() { format!("{} values, worst abs err {worst:.1e}", errs.len()) } else { bad.join("; ") };
    report(2, "loss formula values", bad.is_empty(), detail)
}

fn prompts(n: usize, seed: u64) -> Vec<PromptInstance> {
    let convs = gen_conversations(n, (1, 3), &TaskGenConfig::default(), seed).unwrap();
    unfold_all(&convs, TransformerConfig::default().ctx_len)
}

fn masked_labels() -> Verdict {
    let mut checked = 0;
    let mut failures = Vec::new();
    for seed in 0..3u64 {
        let net = PolicyModel::new(TransformerConfig::default(), seed).unwrap().net;
        let ex = prompts(6, 100 + seed);
        let refs: Vec<&PromptInstance> = ex.iter().collect();
        let seqs: Vec<_> = refs.iter().map(|e| e.sequence()).collect();
        let tokens: Vec<&[u32]> = seqs.iter().map(|s| s.0.as_slice()).collect();
        let batch = net.pack(&tokens).unwrap();
        let (targets, mask) = next_token_targets(&seqs);

        let mut tape = Tape::new();
        let loss = sft_loss(&net, &mut tape, &refs).unwrap();
        let mut base = net.params.clone();
        tape.backward(loss).unwrap().accumulate_into(&tape, &mut base);

        let prompt_positions: Vec<usize> = (0..targets.len()).filter(|&i| !mask[i]).collect();
        for shift in [1, 7] {
            let mut permuted = targets.clone();
            let n = prompt_positions.len();
            for (j, &i) in prompt_positions.iter().enumerate() {
                permuted[i] = targets[prompt_positions[(j + shift) % n]];
            }
            let mut tape2 = Tape::new();
            let logits = net.lm_logits(&mut tape2, &batch).unwrap();
            let loss2 = tape2.cross_entropy(logits, &permuted, &mask).unwrap();
            let mut other = net.params.clone();
            tape2.backward(loss2).unwrap().accumulate_into(&tape2, &mut other);
            let same_loss = tape.value(loss).item().unwrap().to_bits() == tape2.value(loss2).item().unwrap().to_bits();
            let same_grads = base.iter().zip(other.iter()).all(|((_, a), (_, b))| {
                a.grad().unwrap().iter().zip(b.grad().unwrap()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
            if !(same_loss && same_grads && permuted != targets) {
                failures.push(format!("seed {seed} shift {shift}"));
            }
            checked += 1;
        }
    }
    let detail = if failures.is_empty() {
        format!("{checked} permutations, loss and all parameter gradients bit-identical")
    } else {
        format!("differences at {}", failures.join(", "))
    };
    report(3, "masked SFT loss ignores prompt labels", failures.is_empty(), detail)
}

// ---------------------------------------------------------------------------
// Pipeline runs

struct SeedRun {
    seed: u64,
    root: PathBuf,
    stage_secs: f64,
    experiment_secs: f64,
}

impl SeedRun {
    fn stage_file(&self, stage: StageName, name: &str) -> PathBuf {
        self.root.join(stage.name()).join(name)
    }

    fn summary<T: DeserializeOwned>(&self, kind: ExperimentKind) -> T {
        read(&self.root.join("experiments").join(kind.name()).join("summary.json"))
    }

    fn manifest(&self, stage: StageName) -> RunManifest {
        read(&self.stage_file(stage, "manifest.json"))
    }
}

fn run_full(root: &Path, cfg: &PipelineConfig, threads: usize) -> (f64, f64) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut stage_secs = 0.0;
        for s in StageName::ALL {
            let m = run_stage(root, cfg, s).unwrap_or_else(|e| panic!("seed {} stage {}: {e}", cfg.seed, s.name()));
            stage_secs += m.wall_clock_secs;
        }
        let mut experiment_secs = 0.0;
        for k in ExperimentKind::ALL {
            let m = run_experiment(root, cfg, k)
                .unwrap_or_else(|e| panic!("seed {} experiment {}: {e}", cfg.seed, k.name()));
            experiment_secs += m.wall_clock_secs;
        }
        (stage_secs, experiment_secs)
    })
}

fn desk_config(seed: u64) -> PipelineConfig {
    let text = include_str!("../../../configs/desk.toml");
    PipelineConfig { seed, ..PipelineConfig::from_toml(text).unwrap() }
}

// ---------------------------------------------------------------------------
// Criteria over the three seeded runs

fn rm_quality(runs: &[SeedRun]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let rep: serde_json::Value = read(&r.stage_file(StageName::TrainRm, "rm_report.json"));
        let val: GranularAccuracy = serde_json::from_value(rep["val"].clone()).unwrap();
        let secs = r.manifest(StageName::TrainRm).wall_clock_secs;
        let acc = |k: Rating| val.bucket(k).map(|b| b.accuracy);
        let (sig, neg) = (acc(Rating::Significantly), acc(Rating::Negligibly));
        let trend = matches!((sig, neg), (Some(s), Some(n)) if s >= n);
        pass &= val.overall >= 0.90 && trend && secs <= 300.0;
        let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        parts.push(format!(
            "seed {}: val {:.3} over {} pairs, sig {} negl {}, {secs:.0}s",
            r.seed,
            val.overall,
            val.decided,
            f(sig),
            f(neg)
        ));
    }
    report(4, "reward model quality (val acc >= 0.90, sig >= negl, <= 5 min)", pass, parts.join("; "))
}

fn best_of_n(runs: &[SeedRun]) -> Verdict {
    let mut nested = true;
    let mut rho_ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let reports: Vec<EvalReport> = read(&r.stage_file(StageName::Eval, "eval_report.json"));
        for e in &reports {
            let ns: Vec<usize> = e.best_of_n.iter().map(|p| p.n).collect();
            nested &= ns == BEST_OF_NS;
            nested &= e.best_of_n.windows(2).all(|w| w[1].mean_score >= w[0].mean_score);
            nested &= e.oracle_best_of_n.windows(2).all(|w| w[1].win_rate >= w[0].win_rate);
        }
        let sft = reports.iter().find(|e| e.stage == Stage::Sft).expect("sft eval");
        let rho = sft.score_winrate_rho;
        rho_ok &= rho.is_some_and(|x| x > 0.0);
        let wins: Vec<String> = sft.best_of_n.iter().map(|p| format!("{:.3}", p.win_rate)).collect();
        parts.push(format!(
            "seed {}: rho {} (win {})",
            r.seed,
            rho.map_or("undefined".into(), |x| format!("{x:+.3}")),
            wins.join(" ")
        ));
    }
    report(
        5,
        "best-of-n nesting and score/win-rate correlation",
        nested && rho_ok,
        format!("nested invariants {}; {}", if nested { "hold" } else { "VIOLATED" }, parts.join("; ")),
    )
}

fn rs_ablations(runs: &[SeedRun], cfg: &PipelineConfig) -> Verdict {
    let n = cfg.set.pool_n;
    let rank: Vec<Vec<RankRow>> = runs.iter().map(|r| r.summary(ExperimentKind::RankAblation)).collect();
    let pool: Vec<Vec<RankRow>> = runs.iter().map(|r| r.summary(ExperimentKind::PoolSizeAblation)).collect();
    let at = |rows: &[Vec<RankRow>], f: &dyn Fn(&RankRow) -> bool| {
        mean(rows.iter().map(|rs| rs.iter().find(|r| f(r)).expect("ablation row").win_rate))
    };
    let r1 = at(&rank, &|r| r.rank == 1);
    let rn = at(&rank, &|r| r.rank == n);
    let (p2, p32, p64) =
        (at(&pool, &|r| r.pool_n == 2), at(&pool, &|r| r.pool_n == 32), at(&pool, &|r| r.pool_n == 64));
    let pass = r1 >= rn && (p64 - p32) <= (p32 - p2);
    report(
        6,
        "rejection-sampling ablations",
        pass,
        format!(
            "rank 1 {r1:.4} vs rank {n} {rn:.4}; pool 2/32/64 {p2:.4}/{p32:.4}/{p64:.4}, gain 32->64 {:+.4} vs 2->32 {:+.4}",
            p64 - p32,
            p32 - p2
        ),
    )
}

fn pipeline_improvement(runs: &[SeedRun], cfg: &PipelineConfig) -> Verdict {
    let n = cfg.set.pool_n;
    let rows: Vec<Vec<UpperboundRow>> = runs.iter().map(|r| r.summary(ExperimentKind::Upperbound)).collect();
    let win = |stage: Stage, k: usize| {
        mean(rows.iter().map(|rs| rs.iter().find(|r| r.stage == stage && r.n == k).expect("upperbound row").win_rate))
    };
    let (s1, r1, d1) = (win(Stage::Sft, 1), win(Stage::Rs, 1), win(Stage::Dpo, 1));
    let (s64, d64) = (win(Stage::Sft, n), win(Stage::Dpo, n));
    let hists: Vec<Vec<(Stage, ScoreHistogram)>> = runs.iter().map(|r| r.summary(ExperimentKind::ScoreHist)).collect();
    let stat = |stage: Stage, f: fn(&ScoreHistogram) -> f64| {
        mean(hists.iter().map(|hs| f(&hs.iter().find(|(s, _)| *s == stage).expect("histogram").1)))
    };
    let dp5 = stat(Stage::Dpo, |h| h.p5) - stat(Stage::Sft, |h| h.p5);
    let dmax = stat(Stage::Dpo, |h| h.max) - stat(Stage::Sft, |h| h.max);
    let increasing = s1 < r1 && r1 < d1;
    let upper = (d1 - s1) > (d64 - s64);
    let hist = dp5 > dmax;
    report(
        7,
        "pipeline improvement and upper-bound probe",
        increasing && upper && hist,
        format!(
            "best-of-1 sft/rs/dpo {s1:.4}/{r1:.4}/{d1:.4} ({}); gain best-of-1 {:+.4} vs best-of-{n} {:+.4} ({}); p5 {dp5:+.3} vs max {dmax:+.3} ({})",
            if increasing { "increasing" } else { "NOT increasing" },
            d1 - s1,
            d64 - s64,
            if upper { "ok" } else { "NOT ok" },
            if hist { "ok" } else { "NOT ok" },
        ),
    )
}

fn reject_selection(runs: &[SeedRun]) -> Verdict {
    let rows: Vec<Vec<RejectRow>> = runs
        .iter()
        .map(|r| r.summary::<(serde_json::Value, Vec<RejectRow>)>(ExperimentKind::RejectSelection).1)
        .collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, side) in [("-offset", -1i64), ("+offset", 1)] {
        let mut sel = Vec::new();
        let mut var = Vec::new();
        for rs in &rows {
            let selected = rs.iter().find(|r| r.selected).expect("selected row");
            if let Some(v) = rs.iter().find(|r| r.offset.signum() == side) {
                sel.push(selected.win_rate);
                var.push(v.win_rate);
            }
        }
        if var.is_empty() {
            parts.push(format!("{label}: clamped away on every seed"));
            continue;
        }
        let (s, v) = (mean(sel.iter().copied()), mean(var.iter().copied()));
        pass &= s >= v;
        parts.push(format!("selected {s:.4} vs {label} {v:.4} over {} seeds", var.len()));
    }
    let ranks: Vec<String> = rows
        .iter()
        .map(|rs| {
            rs.iter().map(|r| format!("{}{}", r.rank, if r.selected { "*" } else { "" })).collect::<Vec<_>>().join("/")
        })
        .collect();
    parts.push(format!("ranks {}", ranks.join(", ")));
    report(8, "dispreferred-rank selection", pass, parts.join("; "))
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn manifests(root: &Path) -> HashMap<PathBuf, (String, serde_json::Value)> {
    let mut out = HashMap::new();
    let mut dirs: Vec<PathBuf> = StageName::ALL.iter().map(|s| root.join(s.name())).collect();
    dirs.extend(ExperimentKind::ALL.iter().map(|k| root.join("experiments").join(k.name())));
    for d in dirs {
        let m: RunManifest = read(&d.join("manifest.json"));
        out.insert(d.strip_prefix(root).unwrap().to_path_buf(), (m.run_id, serde_json::to_value(&m.outputs).unwrap()));
    }
    out
}

fn determinism(first: &SeedRun, rerun_root: &Path, threads: (usize, usize)) -> Verdict {
    let (a, b) = (snapshot(&first.root), snapshot(rerun_root));
    let mut diffs: Vec<String> =
        a.iter().filter(|(p, bytes)| b.get(*p) != Some(*bytes)).map(|(p, _)| p.display().to_string()).collect();
    diffs.extend(b.keys().filter(|p| !a.contains_key(*p)).map(|p| format!("extra {}", p.display())));
    let same_manifests = manifests(&first.root) == manifests(rerun_root);
    let pass = diffs.is_empty() && same_manifests && !a.is_empty();
    let detail = if pass {
        format!(
            "{} files byte-identical across reruns with {} and {} threads; run ids and output digests match",
            a.len(),
            threads.0,
            threads.1
        )
    } else {
        format!("differing: {}; manifests match: {same_manifests}", diffs.join(", "))
    };
    report(9, "byte determinism across reruns and thread counts", pass, detail)
}

fn budget(first: &SeedRun, threads: usize) -> Verdict {
    let pass = first.stage_secs < 30.0 * 60.0;
    report(
        10,
        "end-to-end budget (< 30 min)",
        pass,
        format!(
            "full pipeline {:.1} min with {threads} thread(s); experiment sweeps add {:.1} min",
            first.stage_secs / 60.0,
            first.experiment_secs / 60.0
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = vec![autodiff(), loss_oracles(), masked_labels()];

    let keep = std::env::var_os("DESKALIGN_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let base = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    if base.exists() && fs::read_dir(&base).unwrap().next().is_some() && base != tmp.path() {
        panic!("{} must be empty", base.display());
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let (threads, rerun_threads) = (cores, if cores == 1 { 3 } else { 1 });

    let cfg = desk_config(0);
    let mut runs = Vec::new();
    for seed in SEEDS {
        let root = base.join(format!("seed{seed}"));
        let (stage_secs, experiment_secs) = run_full(&root, &desk_config(seed), threads);
        println!("       seed {seed}: pipeline {stage_secs:.0}s, experiments {experiment_secs:.0}s");
        runs.push(SeedRun { seed, root, stage_secs, experiment_secs });
    }
    let rerun = base.join("seed0-rerun");
    run_full(&rerun, &cfg, rerun_threads);

    verdicts.push(rm_quality(&runs));
    verdicts.push(best_of_n(&runs));
    verdicts.push(rs_ablations(&runs, &cfg));
    verdicts.push(pipeline_improvement(&runs, &cfg));
    verdicts.push(reject_selection(&runs));
    verdicts.push(determinism(&runs[0], &rerun, (threads, rerun_threads)));
    verdicts.push(budget(&runs[0], threads));

    println!("\nacceptance summary");
    for v in &verdicts {
        println!("  {:>2} {:<4} {}", v.id, if v.pass { "pass" } else { "FAIL" }, v.name);
    }
    let failed: Vec<String> =
        verdicts.iter().filter(|v| !v.pass).map(|v| format!("{} {} ({})", v.id, v.name, v.detail)).collect();
    assert!(failed.is_empty(), "{} of {} criteria failed:\n{}", failed.len(), verdicts.len(), failed.join("\n"));
}
