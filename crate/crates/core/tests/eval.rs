use deskalign::datasets::{unfold_all, PreferencePair, PromptInstance, Split};
use deskalign::eval::*;
use deskalign::model::{PolicyModel, RewardModel, TransformerConfig};
use deskalign::sampling::{sample_response, GenParams};
use deskalign::taskgen::{gen_conversations, judge_win, oracle_reward, Rating, TaskGenConfig};
use proptest::prelude::*;

fn tiny() -> TransformerConfig {
    TransformerConfig { d_model: 16, n_layers: 1, n_heads: 2, ctx_len: 96, ..TransformerConfig::default() }
}

fn prompts(n: usize, seed: u64) -> Vec<PromptInstance> {
    let convs = gen_conversations(n, (1, 1), &TaskGenConfig::default(), seed).unwrap();
    unfold_all(&convs, 80)
}

fn gen() -> GenParams {
    GenParams { max_new_tokens: 24, seed: 17, ..GenParams::default() }
}

fn bench(reference: &PolicyModel, n: usize) -> Benchmark {
    Benchmark::new(prompts(n, 5), reference, "ref".into(), &gen()).unwrap()
}

#[test]
fn self_play_is_exactly_half() {
    let p = PolicyModel::new(tiny(), 1).unwrap();
    let b = bench(&p, 30);
    let w = eval_winrate(&p, &b, &gen()).unwrap();
    assert_eq!(w.win_rate, 0.5);
    assert!(w.verdicts.iter().all(|&v| v == 0.5));
}

#[test]
fn win_rate_matches_recomputed_verdicts() {
    let reference = PolicyModel::new(tiny(), 1).unwrap();
    let policy = PolicyModel::new(tiny(), 2).unwrap();
    let b = bench(&reference, 30);
    let w = eval_winrate(&policy, &b, &gen()).unwrap();
    let mut sum = 0.0;
    for (it, &v) in b.items.iter().zip(&w.verdicts) {
        let r = sample_response(&policy, &it.prompt.context, &eval_params(&gen(), &it.prompt)).unwrap();
        let again = judge_win(&it.prompt.task, &r.tokens, &it.reference);
        assert_eq!(again, v);
        sum += again;
    }
    assert_eq!(w.win_rate, sum / b.len() as f64);
    assert!(w.verdicts.iter().all(|v| [0.0, 0.5, 1.0].contains(v)));
}

#[test]
fn gold_answers_win_exactly_where_the_reference_is_wrong() {
    let reference = PolicyModel::new(tiny(), 3).unwrap();
    let b = bench(&reference, 40);
    for it in &b.items {
        let t = &it.prompt.task;
        let gold = it.prompt.response.clone();
        assert_eq!(oracle_reward(t, &gold), 1.0);
        let expect = if oracle_reward(t, &it.reference) == oracle_reward(t, &gold) { 0.5 } else { 1.0 };
        assert_eq!(judge_win(t, &gold, &it.reference), expect);
    }
}

#[test]
fn tampered_benchmark_is_rejected() {
    let p = PolicyModel::new(tiny(), 1).unwrap();
    let mut b = bench(&p, 5);
    b.verify().unwrap();
    b.items[0].reference.push(12);
    assert!(matches!(eval_winrate(&p, &b, &gen()), Err(EvalError::DigestMismatch { .. })));
}

#[test]
fn best_of_one_equals_single_sample_and_nested_invariants_hold() {
    let reference = PolicyModel::new(tiny(), 1).unwrap();
    let policy = PolicyModel::new(tiny(), 4).unwrap();
    let rm = RewardModel::from_policy(&policy, 6).unwrap();
    let b = bench(&reference, 25);
    let ns = [1, 2, 4, 8, 16];
    let single = eval_winrate(&policy, &b, &gen()).unwrap();
    let rm_curve = eval_best_of_n(&policy, Selector::Rm(&rm), &b, &ns, &gen()).unwrap();
    let oracle_curve = eval_best_of_n(&policy, Selector::Oracle, &b, &ns, &gen()).unwrap();
    assert_eq!(rm_curve[0].win_rate, single.win_rate);
    assert_eq!(oracle_curve[0].win_rate, single.win_rate);
    for w in rm_curve.windows(2) {
        assert!(w[1].mean_score >= w[0].mean_score);
    }
    for w in oracle_curve.windows(2) {
        assert!(w[1].win_rate >= w[0].win_rate);
        assert!(w[1].mean_oracle_reward >= w[0].mean_oracle_reward);
    }
    let pools = bench_pools(&policy, &b, 16, &gen()).unwrap();
    let small = bench_pools(&policy, &b, 4, &gen()).unwrap();
    for (big, s) in pools.iter().zip(&small) {
        assert_eq!(&big[..4], &s[..]);
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let reference = PolicyModel::new(tiny(), 1).unwrap();
    let policy = PolicyModel::new(tiny(), 4).unwrap();
    let rm = RewardModel::from_policy(&policy, 6).unwrap();
    let b = bench(&reference, 20);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let w = eval_winrate(&policy, &b, &gen()).unwrap();
            let c = eval_best_of_n(&policy, Selector::Rm(&rm), &b, &[1, 4, 8], &gen()).unwrap();
            (w, c)
        })
    };
    assert_eq!(run(1), run(3));
}

fn pair(rating: Rating, margin: f64) -> PreferencePair {
    let p = prompts(1, 2).remove(0);
    PreferencePair {
        chosen: vec![10],
        rejected: vec![11],
        rating,
        margin,
        split: Split::Val,
        reason: String::new(),
        prompt: p,
    }
}

fn pairs() -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for (i, r) in Rating::ALL.into_iter().enumerate() {
        for j in 0..(3 + i * 2) {
            out.push(pair(r, 0.05 + 0.2 * (3 - i) as f64 + j as f64 * 1e-3));
        }
    }
    out.push(pair(Rating::Negligibly, 0.0));
    out
}

#[test]
fn granular_accuracy_perfect_flipped_and_weighted() {
    let ps = pairs();
    let hi: Vec<f32> = (0..ps.len()).map(|i| 1.0 + i as f32).collect();
    let lo: Vec<f32> = vec![0.0; ps.len()];
    let perfect = granular_accuracy_from_scores(&ps, &hi, &lo);
    assert!(perfect.buckets.iter().all(|b| b.accuracy == 1.0));
    assert_eq!(perfect.buckets.len(), 4);
    assert_eq!(perfect.zero_margin_excluded, 1);

    let mixed: Vec<f32> = (0..ps.len()).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
    let neg: Vec<f32> = mixed.iter().map(|x| -x).collect();
    let a = granular_accuracy_from_scores(&ps, &mixed, &lo);
    let flipped = granular_accuracy_from_scores(&ps, &neg, &lo);
    for (x, y) in a.buckets.iter().zip(&flipped.buckets) {
        assert_eq!(x.rating, y.rating);
        assert!((x.accuracy - (1.0 - y.accuracy)).abs() <= 1e-12);
    }
    assert!((a.weighted_average() - a.overall).abs() <= 1e-12);
}

#[test]
fn empty_buckets_are_absent() {
    let ps: Vec<PreferencePair> = (0..4).map(|_| pair(Rating::Better, 0.3)).collect();
    let a = granular_accuracy_from_scores(&ps, &[1.0; 4], &[0.0; 4]);
    assert_eq!(a.buckets.len(), 1);
    assert!(a.bucket(Rating::Significantly).is_none());
    assert!(granular_accuracy_from_scores(&[], &[], &[]).overall.is_nan());
}

fn curve(scores: &[f64], wins: &[f64]) -> Vec<CurvePoint> {
    scores
        .iter()
        .zip(wins)
        .enumerate()
        .map(|(i, (&s, &w))| CurvePoint { n: 1 << i, win_rate: w, mean_score: s, mean_oracle_reward: 0.0 })
        .collect()
}

#[test]
fn correlation_endpoints() {
    let s = [0.1, 0.4, 0.5, 0.9, 1.3];
    assert_eq!(score_winrate_correlation(&curve(&s, &[0.2, 0.3, 0.31, 0.5, 0.8])), Some(1.0));
    assert_eq!(score_winrate_correlation(&curve(&s, &[0.8, 0.5, 0.31, 0.3, 0.2])), Some(-1.0));
    assert_eq!(score_winrate_correlation(&curve(&s[..3], &[0.1, 0.2, 0.3])), None);
    assert_eq!(score_winrate_correlation(&curve(&s, &[0.5; 5])), None);
}

/// Spearman rho as Pearson correlation of average ranks.
fn spearman_oracle(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let less = v.iter().filter(|&&y| y < x).count() as f64;
                let eq = v.iter().filter(|&&y| y == x).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

proptest! {
    #[test]
    fn spearman_matches_rank_pearson(v in proptest::collection::vec((0i32..6, 0i32..6), 2..12)) {
        let xs: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
        let ys: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
        match (spearman(&xs, &ys), spearman_oracle(&xs, &ys)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
            (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
        }
    }

    #[test]
    fn histogram_mass_equals_count(scores in proptest::collection::vec(-10.0f64..10.0, 1..200), bins in 1usize..30) {
        let edges = ScoreHistogram::uniform_edges(-4.0, 4.0, bins);
        let h = ScoreHistogram::new(&scores, &edges);
        prop_assert_eq!(h.counts.iter().sum::<usize>(), scores.len());
        prop_assert!(h.p5 <= h.p50 && h.p50 <= h.p95 && h.p95 <= h.max);
        prop_assert_eq!(h.max, scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
}

#[test]
fn identical_checkpoints_give_identical_histograms() {
    let policy = PolicyModel::new(tiny(), 4).unwrap();
    let rm = RewardModel::from_policy(&policy, 6).unwrap();
    let b = bench(&policy, 20);
    let edges = ScoreHistogram::uniform_edges(-4.0, 4.0, 20);
    let a = score_histogram(&policy, &rm, &b, &gen(), &edges).unwrap();
    let c = score_histogram(&policy.clone(), &rm, &b, &gen(), &edges).unwrap();
    assert_eq!(a, c);
    assert_eq!(a.counts.iter().sum::<usize>(), b.len());
}

#[test]
fn percentile_is_nearest_rank() {
    let xs: Vec<f64> = (1..=20).rev().map(f64::from).collect();
    assert_eq!(percentile(&xs, 0.0), 1.0);
    assert_eq!(percentile(&xs, 5.0), 1.0);
    assert_eq!(percentile(&xs, 6.0), 2.0);
    assert_eq!(percentile(&xs, 50.0), 10.0);
    assert_eq!(percentile(&xs, 95.0), 19.0);
    assert_eq!(percentile(&xs, 100.0), 20.0);
    assert!(percentile(&[], 50.0).is_nan());
}
