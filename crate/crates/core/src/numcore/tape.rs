//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends one node holding its output value and whatever it saved
//! for the backward pass. Because a node can only reference earlier nodes,
//! the tape is always in topological order and backward is a single reverse
//! sweep.
//!
//! Sequences are packed without padding: a batch of `B` sequences with
//! lengths `L_0..L_{B-1}` is a `[ΣL, d]` matrix plus a [`SeqLayout`] that the
//! attention and segment-sum ops use to keep sequences apart.

use super::{NumError, ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boundaries of packed sequences inside a `[total, d]` activation matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    offsets: Vec<usize>,
}

impl SeqLayout {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        let mut acc = 0;
        for &l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Self { offsets }
    }

    pub fn num_seqs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, seq: usize) -> std::ops::Range<usize> {
        self.offsets[seq]..self.offsets[seq + 1]
    }

    pub fn len_of(&self, seq: usize) -> usize {
        self.offsets[seq + 1] - self.offsets[seq]
    }

    /// Position of every packed row within its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for s in 0..self.num_seqs() {
            out.extend(0..self.len_of(s));
        }
        out
    }

    /// Packed row index of each sequence's final element.
    pub fn last_rows(&self) -> Vec<usize> {
        (0..self.num_seqs()).map(|s| self.offsets[s + 1] - 1).collect()
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf { param: Option<usize> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var, broadcast: bool },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, scale: T },
    Sigmoid { a: Var },
    LogSigmoid { a: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    TokenLogProb { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    SegmentSum { a: Var, layout: SeqLayout, mask: Vec<bool> },
    Sum { a: Var },
    Mean { a: Var },
    Attention { q: Var, k: Var, v: Var, layout: SeqLayout, heads: usize, probs: Vec<T> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::Sigmoid { .. } => "sigmoid",
            Op::LogSigmoid { .. } => "log_sigmoid",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::TokenLogProb { .. } => "token_logprob",
            Op::SegmentSum { .. } => "segment_sum",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Attention { .. } => "causal_attention",
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Layer-normalization epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Numerically stable `ln σ(x)`.
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x < T::ZERO {
        x - (T::ONE + x.exp()).ln()
    } else {
        -((T::ONE + (-x).exp()).ln())
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x < T::ZERO {
        let e = x.exp();
        e / (T::ONE + e)
    } else {
        T::ONE / (T::ONE + (-x).exp())
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::ONE + t);
    let dinner = c * (T::ONE + three * a * x * x);
    let deriv = half * (T::ONE + t) + half * x * (T::ONE - t * t) * dinner;
    (value, deriv)
}

/// Row-wise softmax of a `[rows, cols]` buffer.
pub fn softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; data.len()];
    if cols == 0 {
        return out;
    }
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let mut m = src[0];
        for &x in src {
            m = m.max(x);
        }
        let mut z = T::ZERO;
        for (d, &x) in dst.iter_mut().zip(src) {
            *d = (x - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / z;
        }
    }
    out
}

fn shapes(ts: &[&Tensor<impl Scalar>]) -> String {
    ts.iter().map(|t| format!("{:?}", t.shape())).collect::<Vec<_>>().join(" vs ")
}

/// Recorded computation; one per forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var, NumError> {
        if !value.all_finite() {
            return Err(NumError::NumericFault { op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<(), NumError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NumError::UnknownVar)
        }
    }

    /// Constant input (receives a gradient but is not tied to a parameter).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.clear_grad();
        self.nodes.push(Node { op: Op::Leaf { param: None }, value: t });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a copy of parameter `index` of `store`; its gradient is
    /// routed back by [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        let mut t = store.tensor(index).clone();
        t.clear_grad();
        self.nodes.push(Node { op: Op::Leaf { param: Some(index) }, value: t });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(NumError::ShapeMismatch { op: "matmul", detail: shapes(&[ta, tb]) });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::ZERO; m * n];
        T::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul { a, b }, value)
    }

    /// Elementwise sum; `b` may also be a vector broadcast over rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = if ta.shape() == tb.shape() {
            false
        } else if tb.rank() == 1 && ta.rank() >= 1 && ta.shape().last() == tb.shape().first() {
            true
        } else {
            return Err(NumError::ShapeMismatch { op: "add", detail: shapes(&[ta, tb]) });
        };
        let mut out = ta.data().to_vec();
        if broadcast {
            let cols = tb.len();
            for row in out.chunks_mut(cols) {
                for (o, &x) in row.iter_mut().zip(tb.data()) {
                    *o += x;
                }
            }
        } else {
            for (o, &x) in out.iter_mut().zip(tb.data()) {
                *o += x;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(Op::Add { a, b, broadcast }, value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumError::ShapeMismatch { op: "sub", detail: shapes(&[ta, tb]) });
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(Op::Sub { a, b }, value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumError::ShapeMismatch { op: "mul", detail: shapes(&[ta, tb]) });
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(Op::Mul { a, b }, value)
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var, NumError> {
        self.check(a)?;
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| scale * x + shift).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(Op::Affine { a, scale }, value)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, NumError> {
        self.check(a)?;
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(op, value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, log_sigmoid, Op::LogSigmoid { a })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu { a })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumError> {
        self.check(a)?;
        let ta = self.value(a);
        let (_, cols) = ta.rows_cols();
        let value = Tensor::new(ta.shape().to_vec(), softmax_rows(ta.data(), cols))?;
        self.push(Op::Softmax { a }, value)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumError> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = tx.rows_cols();
        if tx.rank() == 0 || tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(NumError::ShapeMismatch { op: "layer_norm", detail: shapes(&[tx, tg, tb]) });
        }
        let eps = T::from_f64(LN_EPS);
        let inv_n = T::from_f64(1.0 / cols as f64);
        let mut xhat = vec![T::ZERO; rows * cols];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_n;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(Op::LayerNorm { x, gain, bias, xhat, rstd }, value)
    }

    /// Rows of `table: [V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        self.check(table)?;
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(NumError::ShapeMismatch { op: "embedding", detail: shapes(&[tt]) });
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumError::IndexOutOfRange { op: "embedding", index: id, bound: v });
            }
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(Op::Embedding { table, ids: ids.to_vec() }, value)
    }

    /// Selects rows of `a` viewed as `[rows, rest]`; a vector counts as `[n, 1]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NumError> {
        self.check(a)?;
        let ta = self.value(a);
        if ta.rank() == 0 {
            return Err(NumError::ShapeMismatch { op: "gather_rows", detail: shapes(&[ta]) });
        }
        let n = ta.shape()[0];
        let width = ta.len() / n.max(1);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(NumError::IndexOutOfRange { op: "gather_rows", index: r, bound: n });
            }
            out.extend_from_slice(&ta.data()[r * width..(r + 1) * width]);
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, out)?;
        self.push(Op::GatherRows { a, rows: rows.to_vec() }, value)
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    ///
    /// Targets at unmasked rows are never read. An all-false mask gives 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, NumError> {
        self.check(logits)?;
        let tl = self.value(logits);
        if tl.rank() != 2 || targets.len() != tl.shape()[0] || mask.len() != targets.len() {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {:?}, {} targets, {} mask", tl.shape(), targets.len(), mask.len()),
            });
        }
        let (rows, cols) = (tl.shape()[0], tl.shape()[1]);
        let mut probs = vec![T::ZERO; rows * cols];
        let mut loss = T::ZERO;
        let mut count = 0usize;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= cols {
                return Err(NumError::IndexOutOfRange { op: "cross_entropy", index: targets[r], bound: cols });
            }
            let row = &tl.data()[r * cols..(r + 1) * cols];
            probs[r * cols..(r + 1) * cols].copy_from_slice(&softmax_rows(row, cols));
            loss += -log_softmax_at(row, targets[r]);
            count += 1;
        }
        let loss = if count > 0 { loss / T::from_f64(count as f64) } else { T::ZERO };
        let value = Tensor::scalar(loss);
        self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count }, value)
    }

    /// `log softmax(logits[t])[targets[t]]` for every row, giving `[rows]`.
    pub fn token_logprob(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumError> {
        self.check(logits)?;
        let tl = self.value(logits);
        if tl.rank() != 2 || targets.len() != tl.shape()[0] {
            return Err(NumError::ShapeMismatch {
                op: "token_logprob",
                detail: format!("logits {:?}, {} targets", tl.shape(), targets.len()),
            });
        }
        let (rows, cols) = (tl.shape()[0], tl.shape()[1]);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            if targets[r] >= cols {
                return Err(NumError::IndexOutOfRange { op: "token_logprob", index: targets[r], bound: cols });
            }
            out.push(log_softmax_at(&tl.data()[r * cols..(r + 1) * cols], targets[r]));
        }
        let probs = softmax_rows(tl.data(), cols);
        let value = Tensor::from_vec(out);
        self.push(Op::TokenLogProb { logits, targets: targets.to_vec(), probs }, value)
    }

    /// Per-sequence sum of `a: [total]` over rows where `mask` is set.
    pub fn segment_sum(&mut self, a: Var, layout: &SeqLayout, mask: &[bool]) -> Result<Var, NumError> {
        self.check(a)?;
        let ta = self.value(a);
        if ta.rank() != 1 || ta.len() != layout.total() || mask.len() != layout.total() {
            return Err(NumError::ShapeMismatch {
                op: "segment_sum",
                detail: format!("{:?} over layout of {} rows, {} mask", ta.shape(), layout.total(), mask.len()),
            });
        }
        let mut out = vec![T::ZERO; layout.num_seqs()];
        for (s, o) in out.iter_mut().enumerate() {
            for r in layout.range(s) {
                if mask[r] {
                    *o += ta.data()[r];
                }
            }
        }
        let value = Tensor::from_vec(out);
        self.push(Op::SegmentSum { a, layout: layout.clone(), mask: mask.to_vec() }, value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        self.check(a)?;
        let s: f64 = self.value(a).data().iter().map(|x| x.to_f64()).sum();
        self.push(Op::Sum { a }, Tensor::scalar(T::from_f64(s)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        self.check(a)?;
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(NumError::ShapeMismatch { op: "mean", detail: "empty tensor".into() });
        }
        let s: f64 = ta.data().iter().map(|x| x.to_f64()).sum();
        let m = T::from_f64(s / ta.len() as f64);
        self.push(Op::Mean { a }, Tensor::scalar(m))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[total, d]` with heads laid out as contiguous
    /// column blocks of width `d / heads`. Row `t` of a sequence attends to
    /// rows `0..=t` of the same sequence only.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &SeqLayout,
        heads: usize,
    ) -> Result<Var, NumError> {
        self.check(q)?;
        self.check(k)?;
        self.check(v)?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.rank() != 2
            || tq.shape() != tk.shape()
            || tq.shape() != tv.shape()
            || tq.shape()[0] != layout.total()
            || heads == 0
            || tq.shape()[1] % heads != 0
        {
            return Err(NumError::ShapeMismatch {
                op: "causal_attention",
                detail: format!("{} with {} rows, {heads} heads", shapes(&[tq, tk, tv]), layout.total()),
            });
        }
        let d = tq.shape()[1];
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let prob_len: usize = (0..layout.num_seqs()).map(|s| layout.len_of(s).pow(2) * heads).sum();
        let mut probs = vec![T::ZERO; prob_len];
        let mut out = vec![T::ZERO; layout.total() * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut off = 0;
        for s in 0..layout.num_seqs() {
            let start = layout.range(s).start;
            let l = layout.len_of(s);
            for h in 0..heads {
                let c0 = h * dh;
                let p = &mut probs[off..off + l * l];
                for i in 0..l {
                    let qi = &qd[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    let row = &mut p[i * l..i * l + l];
                    let mut m = T::from_f64(f64::NEG_INFINITY);
                    for j in 0..=i {
                        let kj = &kd[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        let mut dot = T::ZERO;
                        for (&a, &b) in qi.iter().zip(kj) {
                            dot += a * b;
                        }
                        row[j] = dot * scale;
                        m = m.max(row[j]);
                    }
                    let mut z = T::ZERO;
                    for x in row[..=i].iter_mut() {
                        *x = (*x - m).exp();
                        z += *x;
                    }
                    for x in row[..=i].iter_mut() {
                        *x = *x / z;
                    }
                    let oi = &mut out[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    for j in 0..=i {
                        let w = row[j];
                        let vj = &vd[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                off += l * l;
            }
        }
        let value = Tensor::new(vec![layout.total(), d], out)?;
        self.push(Op::Attention { q, k, v, layout: layout.clone(), heads, probs }, value)
    }

    /// Gradients of scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumError> {
        if loss.0 >= self.nodes.len() {
            return Err(NumError::UnknownVar);
        }
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(NumError::NotScalar { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(delta) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        }
        let out = &node.value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut da = vec![T::ZERO; m * k];
                T::gemm(m, n, k, g, false, tb.data(), true, &mut da, false);
                let mut db = vec![T::ZERO; k * n];
                T::gemm(k, m, n, ta.data(), true, g, false, &mut db, false);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add { a, b, broadcast } => {
                acc(grads, *a, g.to_vec());
                if *broadcast {
                    let cols = self.value(*b).len();
                    let mut db = vec![T::ZERO; cols];
                    for row in g.chunks(cols) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(grads, *b, db);
                } else {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.iter().zip(tb.data()).map(|(&x, &y)| x * y).collect());
                acc(grads, *b, g.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect());
            }
            Op::Affine { a, scale } => {
                acc(grads, *a, g.iter().map(|&x| x * *scale).collect());
            }
            Op::Sigmoid { a } => {
                let d = g.iter().zip(out.data()).map(|(&x, &s)| x * s * (T::ONE - s)).collect();
                acc(grads, *a, d);
            }
            Op::LogSigmoid { a } => {
                let d = g.iter().zip(self.value(*a).data()).map(|(&x, &z)| x * sigmoid(-z)).collect();
                acc(grads, *a, d);
            }
            Op::Gelu { a } => {
                let d = g.iter().zip(self.value(*a).data()).map(|(&x, &z)| x * gelu_parts(z).1).collect();
                acc(grads, *a, d);
            }
            Op::Softmax { a } => {
                let (_, cols) = out.rows_cols();
                let mut d = vec![T::ZERO; g.len()];
                for ((gr, yr), dr) in g.chunks(cols).zip(out.data().chunks(cols)).zip(d.chunks_mut(cols)) {
                    let mut dot = T::ZERO;
                    for (&x, &y) in gr.iter().zip(yr) {
                        dot += x * y;
                    }
                    for ((o, &x), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = y * (x - dot);
                    }
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = self.value(*gain);
                let cols = tg.len();
                let rows = rstd.len();
                let inv_n = T::from_f64(1.0 / cols as f64);
                let mut dx = vec![T::ZERO; rows * cols];
                let mut dg = vec![T::ZERO; cols];
                let mut db = vec![T::ZERO; cols];
                let mut dxhat = vec![T::ZERO; cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = T::ZERO;
                    let mut mean_dh = T::ZERO;
                    for c in 0..cols {
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                        dxhat[c] = gr[c] * tg.data()[c];
                        mean_d += dxhat[c];
                        mean_dh += dxhat[c] * hr[c];
                    }
                    mean_d *= inv_n;
                    mean_dh *= inv_n;
                    for c in 0..cols {
                        dx[r * cols + c] = rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dg);
                acc(grads, *bias, db);
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.shape()[1];
                let mut dt = vec![T::ZERO; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
                acc(grads, *table, dt);
            }
            Op::GatherRows { a, rows } => {
                let ta = self.value(*a);
                let width = ta.len() / ta.shape()[0].max(1);
                let mut da = vec![T::ZERO; ta.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..width {
                        da[r * width + c] += g[i * width + c];
                    }
                }
                acc(grads, *a, da);
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let tl = self.value(*logits);
                let cols = tl.shape()[1];
                let mut d = vec![T::ZERO; tl.len()];
                if *count > 0 {
                    let scale = g[0] / T::from_f64(*count as f64);
                    for r in 0..mask.len() {
                        if !mask[r] {
                            continue;
                        }
                        for c in 0..cols {
                            d[r * cols + c] = probs[r * cols + c] * scale;
                        }
                        d[r * cols + targets[r]] -= scale;
                    }
                }
                acc(grads, *logits, d);
            }
            Op::TokenLogProb { logits, targets, probs } => {
                let tl = self.value(*logits);
                let cols = tl.shape()[1];
                let mut d = vec![T::ZERO; tl.len()];
                for (r, &gr) in g.iter().enumerate() {
                    for c in 0..cols {
                        d[r * cols + c] = -probs[r * cols + c] * gr;
                    }
                    d[r * cols + targets[r]] += gr;
                }
                acc(grads, *logits, d);
            }
            Op::SegmentSum { a, layout, mask } => {
                let mut d = vec![T::ZERO; layout.total()];
                for (s, &gs) in g.iter().enumerate() {
                    for r in layout.range(s) {
                        if mask[r] {
                            d[r] = gs;
                        }
                    }
                }
                acc(grads, *a, d);
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                acc(grads, *a, vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).len();
                acc(grads, *a, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::Attention { q, k, v, layout, heads, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.shape()[1];
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut dq = vec![T::ZERO; tq.len()];
                let mut dk = vec![T::ZERO; tk.len()];
                let mut dv = vec![T::ZERO; tv.len()];
                let mut dp = Vec::new();
                let mut off = 0;
                for s in 0..layout.num_seqs() {
                    let start = layout.range(s).start;
                    let l = layout.len_of(s);
                    for h in 0..*heads {
                        let c0 = h * dh;
                        let p = &probs[off..off + l * l];
                        for i in 0..l {
                            let gi = &g[(start + i) * d + c0..(start + i) * d + c0 + dh];
                            dp.clear();
                            let mut weighted = T::ZERO;
                            for j in 0..=i {
                                let vj = &vd[(start + j) * d + c0..(start + j) * d + c0 + dh];
                                let mut dot = T::ZERO;
                                for (&a, &b) in gi.iter().zip(vj) {
                                    dot += a * b;
                                }
                                dp.push(dot);
                                weighted += dot * p[i * l + j];
                                let pij = p[i * l + j];
                                let dvj = &mut dv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                                for (o, &x) in dvj.iter_mut().zip(gi) {
                                    *o += pij * x;
                                }
                            }
                            for j in 0..=i {
                                let ds = p[i * l + j] * (dp[j] - weighted) * scale;
                                for c in 0..dh {
                                    dq[(start + i) * d + c0 + c] += ds * kd[(start + j) * d + c0 + c];
                                    dk[(start + j) * d + c0 + c] += ds * qd[(start + i) * d + c0 + c];
                                }
                            }
                        }
                        off += l * l;
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
        }
    }
}

fn log_softmax_at<T: Scalar>(row: &[T], target: usize) -> T {
    let mut m = row[0];
    for &x in row {
        m = m.max(x);
    }
    let mut z = T::ZERO;
    for &x in row {
        z += (x - m).exp();
    }
    row[target] - m - z.ln()
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter leaf's gradient into the store's grad buffers.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>) {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf { param: Some(idx) }, Some(g)) = (&node.op, g) {
                store.tensor_mut(*idx).accumulate_grad(g);
            }
        }
    }
}
