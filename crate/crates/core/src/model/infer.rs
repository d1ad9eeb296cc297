//! Single-token incremental forward pass with a key/value cache. Mirrors
//! [`Transformer::hidden`] without recording a tape.

use super::transformer::{HeadMode, Transformer};
use super::ModelError;
use crate::numcore::LN_EPS;
use crate::vocab::Token;

/// Keys and values of every processed position, per layer.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

struct Layer<'a> {
    ln1: (&'a [f32], &'a [f32]),
    q: (&'a [f32], &'a [f32]),
    k: (&'a [f32], &'a [f32]),
    v: (&'a [f32], &'a [f32]),
    o: (&'a [f32], &'a [f32]),
    ln2: (&'a [f32], &'a [f32]),
    up: (&'a [f32], &'a [f32]),
    down: (&'a [f32], &'a [f32]),
}

/// Borrowed parameter slices resolved once per generation.
pub(crate) struct Weights<'a> {
    net: &'a Transformer,
    tok: &'a [f32],
    pos: &'a [f32],
    layers: Vec<Layer<'a>>,
    lnf: (&'a [f32], &'a [f32]),
    head: (&'a [f32], &'a [f32]),
}

fn layer_norm(x: &[f32], g: &[f32], b: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let rs = 1.0 / (var + LN_EPS as f32).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rs * g[i] + b[i];
    }
}

/// `out = x · w + b` for row-major `w: [x.len(), out.len()]`.
fn affine(x: &[f32], (w, b): (&[f32], &[f32]), out: &mut [f32]) {
    let n = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

fn gelu(x: f32) -> f32 {
    let c = (2.0f64 / std::f64::consts::PI).sqrt() as f32;
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

impl Transformer {
    pub(crate) fn weights(&self) -> Result<Weights<'_>, ModelError> {
        if self.config.head_mode != HeadMode::Lm {
            return Err(ModelError::HeadMismatch { expected: HeadMode::Lm, found: self.config.head_mode });
        }
        let p = |name: &str| self.param(name).data();
        let pair = |a: &str, b: &str| (p(a), p(b));
        let layers = (0..self.config.n_layers)
            .map(|l| {
                let n = |s: &str| format!("layer{l}.{s}");
                Layer {
                    ln1: pair(&n("ln1.g"), &n("ln1.b")),
                    q: pair(&n("attn.wq"), &n("attn.bq")),
                    k: pair(&n("attn.wk"), &n("attn.bk")),
                    v: pair(&n("attn.wv"), &n("attn.bv")),
                    o: pair(&n("attn.wo"), &n("attn.bo")),
                    ln2: pair(&n("ln2.g"), &n("ln2.b")),
                    up: pair(&n("mlp.w1"), &n("mlp.b1")),
                    down: pair(&n("mlp.w2"), &n("mlp.b2")),
                }
            })
            .collect();
        Ok(Weights {
            net: self,
            tok: p("tok_emb"),
            pos: p("pos_emb"),
            layers,
            lnf: pair("lnf.g", "lnf.b"),
            head: pair("lm_head.w", "lm_head.b"),
        })
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache { keys: vec![Vec::new(); self.config.n_layers], values: vec![Vec::new(); self.config.n_layers], len: 0 }
    }

    /// Feeds `tokens` into a fresh cache and returns it with the logits
    /// after the last token.
    pub fn prefill(&self, tokens: &[Token]) -> Result<(KvCache, Vec<f32>), ModelError> {
        self.check_tokens(tokens)?;
        let w = self.weights()?;
        let mut cache = self.new_cache();
        let mut logits = Vec::new();
        for &t in tokens {
            logits = w.step(&mut cache, t)?;
        }
        Ok((cache, logits))
    }

    /// Appends one token and returns next-token logits.
    pub fn step(&self, cache: &mut KvCache, token: Token) -> Result<Vec<f32>, ModelError> {
        self.weights()?.step(cache, token)
    }
}

impl Weights<'_> {
    pub(crate) fn step(&self, cache: &mut KvCache, token: Token) -> Result<Vec<f32>, ModelError> {
        let cfg = &self.net.config;
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::OutOfVocab { id: token, vocab: cfg.vocab_size });
        }
        let pos = cache.len;
        if pos >= cfg.ctx_len {
            return Err(ModelError::TooLong { len: pos + 1, ctx: cfg.ctx_len });
        }
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let t = token as usize;
        let mut x: Vec<f32> = (0..d).map(|i| self.tok[t * d + i] + self.pos[pos * d + i]).collect();
        let mut h = vec![0.0; d];
        let (mut q, mut k, mut v, mut a, mut o) =
            (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut up = vec![0.0; cfg.mlp_width()];
        let mut scores = vec![0.0f32; pos + 1];
        for (l, layer) in self.layers.iter().enumerate() {
            layer_norm(&x, layer.ln1.0, layer.ln1.1, &mut h);
            affine(&h, layer.q, &mut q);
            affine(&h, layer.k, &mut k);
            affine(&h, layer.v, &mut v);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            a.iter_mut().for_each(|z| *z = 0.0);
            for hd in 0..heads {
                let c0 = hd * dh;
                let qh = &q[c0..c0 + dh];
                let mut m = f32::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + c0..j * d + c0 + dh];
                    *s = qh.iter().zip(kj).map(|(&x, &y)| x * y).sum::<f32>() * scale;
                    m = m.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for (j, &s) in scores.iter().enumerate() {
                    let p = s / z;
                    let vj = &values[j * d + c0..j * d + c0 + dh];
                    for (dst, &val) in a[c0..c0 + dh].iter_mut().zip(vj) {
                        *dst += p * val;
                    }
                }
            }
            affine(&a, layer.o, &mut o);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            layer_norm(&x, layer.ln2.0, layer.ln2.1, &mut h);
            affine(&h, layer.up, &mut up);
            up.iter_mut().for_each(|z| *z = gelu(*z));
            affine(&up, layer.down, &mut o);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
        }
        cache.len += 1;
        layer_norm(&x, self.lnf.0, self.lnf.1, &mut h);
        let mut logits = vec![0.0; cfg.vocab_size];
        affine(&h, self.head, &mut logits);
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(ModelError::Num(crate::numcore::NumError::NumericFault { op: "lm_step" }));
        }
        Ok(logits)
    }
}
