//! Central finite-difference oracle for every differentiable tape op.

use deskalign::numcore::{NumError, SeqLayout, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumError>>;

pub struct OpCase {
    pub op: &'static str,
    pub inputs: Vec<Vec<usize>>,
    build: Build,
}

fn case(
    op: &'static str,
    inputs: Vec<Vec<usize>>,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumError> + 'static,
) -> OpCase {
    OpCase { op, inputs, build: Box::new(build) }
}

/// Three shape variants for every op.
pub fn cases() -> Vec<OpCase> {
    let mut out = Vec::new();
    for (m, k, n) in [(1, 1, 1), (3, 4, 2), (5, 7, 6)] {
        out.push(case("matmul", vec![vec![m, k], vec![k, n]], |t, v| t.matmul(v[0], v[1])));
    }
    for (r, c) in [(1, 1), (3, 4), (6, 5)] {
        out.push(case("add", vec![vec![r, c], vec![r, c]], |t, v| t.add(v[0], v[1])));
        out.push(case("add_bias", vec![vec![r, c], vec![c]], |t, v| t.add(v[0], v[1])));
        out.push(case("sub", vec![vec![r, c], vec![r, c]], |t, v| t.sub(v[0], v[1])));
        out.push(case("mul", vec![vec![r, c], vec![r, c]], |t, v| t.mul(v[0], v[1])));
        out.push(case("affine", vec![vec![r, c]], |t, v| t.affine(v[0], -1.7, 0.3)));
        out.push(case("sigmoid", vec![vec![r, c]], |t, v| t.sigmoid(v[0])));
        out.push(case("log_sigmoid", vec![vec![r, c]], |t, v| t.log_sigmoid(v[0])));
        out.push(case("gelu", vec![vec![r, c]], |t, v| t.gelu(v[0])));
        out.push(case("softmax", vec![vec![r, c]], |t, v| t.softmax(v[0])));
        out.push(case("sum", vec![vec![r, c]], |t, v| t.sum(v[0])));
        out.push(case("mean", vec![vec![r, c]], |t, v| t.mean(v[0])));
    }
    for (r, c) in [(1, 2), (3, 4), (5, 8)] {
        out.push(case("layer_norm", vec![vec![r, c], vec![c], vec![c]], |t, v| t.layer_norm(v[0], v[1], v[2])));
    }
    for (vocab, d, n) in [(2, 1, 1), (5, 3, 4), (7, 4, 9)] {
        out.push(case("embedding", vec![vec![vocab, d]], move |t, v| {
            let ids: Vec<usize> = (0..n).map(|i| (i * 3 + 1) % vocab).collect();
            t.embedding(v[0], &ids)
        }));
        out.push(case("gather_rows", vec![vec![vocab, d]], move |t, v| {
            let rows: Vec<usize> = (0..n).map(|i| (i * 5 + 2) % vocab).collect();
            t.gather_rows(v[0], &rows)
        }));
    }
    for (rows, cols) in [(1, 2), (4, 3), (6, 7)] {
        out.push(case("cross_entropy", vec![vec![rows, cols]], move |t, v| {
            let targets: Vec<usize> = (0..rows).map(|i| (i * 2 + 1) % cols).collect();
            let mask: Vec<bool> = (0..rows).map(|i| rows == 1 || i % 3 != 1).collect();
            t.cross_entropy(v[0], &targets, &mask)
        }));
        out.push(case("token_logprob", vec![vec![rows, cols]], move |t, v| {
            let targets: Vec<usize> = (0..rows).map(|i| (i * 2 + 1) % cols).collect();
            t.token_logprob(v[0], &targets)
        }));
    }
    for lengths in [vec![1], vec![2, 3], vec![4, 1, 3]] {
        let total: usize = lengths.iter().sum();
        let layout = SeqLayout::from_lengths(&lengths);
        out.push(case("segment_sum", vec![vec![total]], move |t, v| {
            let mask: Vec<bool> = (0..layout.total()).map(|i| i % 4 != 2).collect();
            t.segment_sum(v[0], &layout, &mask)
        }));
    }
    for (lengths, d, heads) in [(vec![1], 2, 1), (vec![3, 2], 4, 2), (vec![4, 1, 5], 6, 3)] {
        let total: usize = lengths.iter().sum();
        let layout = SeqLayout::from_lengths(&lengths);
        out.push(case("causal_attention", vec![vec![total, d]; 3], move |t, v| {
            t.causal_attention(v[0], v[1], v[2], &layout, heads)
        }));
    }
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar probe `Σ w ⊙ op(inputs)` with fixed random `w`.
fn probe(case: &OpCase, inputs: &[Tensor<f64>], weights_seed: u64) -> Result<(Tape<f64>, Vec<Var>, Var), NumError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = tape.leaf(random_tensor(&mut rng, &shape));
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    Ok((tape, vars, loss))
}

#[derive(Debug)]
pub struct CheckReport {
    pub op: &'static str,
    pub shape_index: usize,
    pub seed: u64,
    pub max_rel_err: f64,
}

/// Worst relative error between analytic and central-difference gradients.
///
/// Components whose magnitude is below `1e-7` in both routes are compared in
/// absolute terms against `1e-10` and reported as 0 when they agree.
pub fn check(case: &OpCase, seed: u64) -> Result<f64, NumError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = case.inputs.iter().map(|s| random_tensor(&mut rng, s)).collect();
    let wseed = seed ^ 0x5eed;
    let (tape, vars, loss) = probe(case, &inputs, wseed)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let eval = |delta: f64| -> Result<f64, NumError> {
                let mut perturbed = inputs.clone();
                perturbed[i].data_mut()[j] += delta;
                let (tape, _, loss) = probe(case, &perturbed, wseed)?;
                tape.value(loss).item()
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            let a = analytic[j];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-7 {
                if (a - numeric).abs() <= 1e-10 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (a - numeric).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub const SEEDS: [u64; 5] = [11, 23, 37, 41, 53];

/// Runs every op × shape × seed; returns one report per combination.
pub fn run_all() -> Vec<CheckReport> {
    let mut out = Vec::new();
    let all = cases();
    let mut shape_counter: std::collections::HashMap<&str, usize> = Default::default();
    for c in &all {
        let idx = shape_counter.entry(c.op).or_default();
        for &seed in &SEEDS {
            let max_rel_err = check(c, seed).unwrap_or(f64::INFINITY);
            out.push(CheckReport { op: c.op, shape_index: *idx, seed, max_rel_err });
        }
        *idx += 1;
    }
    out
}
