use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numcore::{ParamStore, SeqLayout, Tape, Tensor, Var};
use crate::seeding::rng;
use crate::vocab::{Token, VOCAB_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Lm,
    Reward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ctx_len: usize,
    pub head_mode: HeadMode,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { vocab_size: VOCAB_SIZE, d_model: 64, n_layers: 2, n_heads: 4, ctx_len: 256, head_mode: HeadMode::Lm }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self;
        if c.vocab_size == 0 || c.d_model == 0 || c.n_layers == 0 || c.n_heads == 0 || c.ctx_len == 0 {
            return Err(ModelError::Config(format!("zero dimension in {c:?}")));
        }
        if !c.d_model.is_multiple_of(c.n_heads) {
            return Err(ModelError::Config(format!("d_model {} not divisible by {} heads", c.d_model, c.n_heads)));
        }
        Ok(())
    }

    pub fn mlp_width(&self) -> usize {
        4 * self.d_model
    }
}

/// Token ids, in-sequence positions and boundaries for a packed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub layout: SeqLayout,
}

/// Pre-norm decoder-only transformer with learned absolute positions and an
/// untied output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub params: ParamStore<f32>,
}

const INIT_STD: f64 = 0.02;

fn layer_names(l: usize) -> [String; 16] {
    [
        "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
        "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
    ]
    .map(|n| format!("layer{l}.{n}"))
}

impl Transformer {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut params = ParamStore::new();
        let mut draw = |shape: &[usize], dist: &Normal<f64>| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(&mut r) as f32).collect();
            Tensor::new(shape.to_vec(), data).expect("shape")
        };
        let (d, h, v) = (config.d_model, config.mlp_width(), config.vocab_size);
        params.insert("tok_emb", draw(&[v, d], &normal));
        params.insert("pos_emb", draw(&[config.ctx_len, d], &normal));
        for l in 0..config.n_layers {
            let n = layer_names(l);
            params.insert(&n[0], Tensor::filled(&[d], 1.0));
            params.insert(&n[1], Tensor::zeros(&[d]));
            for (w, b) in [(2, 3), (4, 5), (6, 7)] {
                params.insert(&n[w], draw(&[d, d], &normal));
                params.insert(&n[b], Tensor::zeros(&[d]));
            }
            params.insert(&n[8], draw(&[d, d], &resid));
            params.insert(&n[9], Tensor::zeros(&[d]));
            params.insert(&n[10], Tensor::filled(&[d], 1.0));
            params.insert(&n[11], Tensor::zeros(&[d]));
            params.insert(&n[12], draw(&[d, h], &normal));
            params.insert(&n[13], Tensor::zeros(&[h]));
            params.insert(&n[14], draw(&[h, d], &resid));
            params.insert(&n[15], Tensor::zeros(&[d]));
        }
        params.insert("lnf.g", Tensor::filled(&[d], 1.0));
        params.insert("lnf.b", Tensor::zeros(&[d]));
        match config.head_mode {
            HeadMode::Lm => {
                params.insert("lm_head.w", draw(&[d, v], &normal));
                params.insert("lm_head.b", Tensor::zeros(&[v]));
            }
            HeadMode::Reward => {
                let head = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
                params.insert("rm_head.w", draw(&[d, 1], &head));
                params.insert("rm_head.b", Tensor::zeros(&[1]));
            }
        }
        Ok(Self { config, params })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(config: TransformerConfig) -> Result<Self, ModelError> {
        let mut t = Self::new(config, 0)?;
        for p in t.params.iter_mut() {
            *p = Tensor::zeros(p.shape());
        }
        Ok(t)
    }

    /// Copy of this backbone with the language-model head replaced by a
    /// freshly initialized scalar head.
    pub fn with_reward_head(&self, seed: u64) -> Result<Transformer, ModelError> {
        let config = TransformerConfig { head_mode: HeadMode::Reward, ..self.config };
        let fresh = Transformer::new(config, seed)?;
        let mut params = ParamStore::new();
        for (name, t) in fresh.params.iter() {
            let src = if name.starts_with("rm_head.") { t } else { self.param(name) };
            params.insert(name, src.clone());
        }
        Ok(Transformer { config, params })
    }

    pub fn param(&self, name: &str) -> &Tensor<f32> {
        let i = self.params.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        self.params.tensor(i)
    }

    fn var(&self, tape: &mut Tape<f32>, name: &str) -> Var {
        let i = self.params.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        tape.param(&self.params, i)
    }

    pub fn check_tokens(&self, tokens: &[Token]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Empty("sequence"));
        }
        if tokens.len() > self.config.ctx_len {
            return Err(ModelError::TooLong { len: tokens.len(), ctx: self.config.ctx_len });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::OutOfVocab { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    pub fn pack(&self, seqs: &[&[Token]]) -> Result<PackedBatch, ModelError> {
        let mut ids = Vec::new();
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.check_tokens(s)?;
            ids.extend(s.iter().map(|&t| t as usize));
            lengths.push(s.len());
        }
        let layout = SeqLayout::from_lengths(&lengths);
        Ok(PackedBatch { positions: layout.positions(), ids, layout })
    }

    /// Final-layer-normalized hidden states, `[total, d_model]`.
    pub fn hidden(&self, tape: &mut Tape<f32>, batch: &PackedBatch) -> Result<Var, ModelError> {
        let tok = self.var(tape, "tok_emb");
        let pos = self.var(tape, "pos_emb");
        let te = tape.embedding(tok, &batch.ids)?;
        let pe = tape.embedding(pos, &batch.positions)?;
        let mut x = tape.add(te, pe)?;
        for l in 0..self.config.n_layers {
            let n = layer_names(l);
            let v: Vec<Var> = n.iter().map(|name| self.var(tape, name)).collect();
            let h = tape.layer_norm(x, v[0], v[1])?;
            let lin = |tape: &mut Tape<f32>, inp: Var, w: Var, b: Var| -> Result<Var, ModelError> {
                let m = tape.matmul(inp, w)?;
                Ok(tape.add(m, b)?)
            };
            let q = lin(tape, h, v[2], v[3])?;
            let k = lin(tape, h, v[4], v[5])?;
            let vv = lin(tape, h, v[6], v[7])?;
            let a = tape.causal_attention(q, k, vv, &batch.layout, self.config.n_heads)?;
            let o = lin(tape, a, v[8], v[9])?;
            x = tape.add(x, o)?;
            let h2 = tape.layer_norm(x, v[10], v[11])?;
            let m1 = lin(tape, h2, v[12], v[13])?;
            let g = tape.gelu(m1)?;
            let m2 = lin(tape, g, v[14], v[15])?;
            x = tape.add(x, m2)?;
        }
        let g = self.var(tape, "lnf.g");
        let b = self.var(tape, "lnf.b");
        Ok(tape.layer_norm(x, g, b)?)
    }

    /// Next-token logits, `[total, vocab]`.
    pub fn lm_logits(&self, tape: &mut Tape<f32>, batch: &PackedBatch) -> Result<Var, ModelError> {
        if self.config.head_mode != HeadMode::Lm {
            return Err(ModelError::HeadMismatch { expected: HeadMode::Lm, found: self.config.head_mode });
        }
        let h = self.hidden(tape, batch)?;
        let w = self.var(tape, "lm_head.w");
        let b = self.var(tape, "lm_head.b");
        let m = tape.matmul(h, w)?;
        Ok(tape.add(m, b)?)
    }

    /// One scalar per sequence read at its final token, `[num_seqs, 1]`.
    pub fn reward_scores(&self, tape: &mut Tape<f32>, batch: &PackedBatch) -> Result<Var, ModelError> {
        if self.config.head_mode != HeadMode::Reward {
            return Err(ModelError::HeadMismatch { expected: HeadMode::Reward, found: self.config.head_mode });
        }
        let h = self.hidden(tape, batch)?;
        let last = tape.gather_rows(h, &batch.layout.last_rows())?;
        let w = self.var(tape, "rm_head.w");
        let b = self.var(tape, "rm_head.b");
        let m = tape.matmul(last, w)?;
        Ok(tape.add(m, b)?)
    }
}
