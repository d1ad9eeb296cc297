use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::datasets::{PairBuildConfig, RankedBuildConfig};
use crate::model::TransformerConfig;
use crate::numcore::{ScheduleKind, Warmup};
use crate::sampling::GenParams;
use crate::taskgen::{Rating, TaskGenConfig};
use crate::trainers::{StageKind, TrainConfig};
use crate::vocab::VOCAB_SIZE;

/// Whole-pipeline configuration. Every section is a flat table of typed
/// keys; absent keys take the desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seeds above `i64::MAX` are written as decimal strings.
    #[serde(with = "seed_repr")]
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub sft: StageSection,
    pub pairs: PairsSection,
    pub rm: StageSection,
    pub set: SetSection,
    pub rs: RsSection,
    pub dpo: DpoSection,
    pub eval: EvalSection,
    pub experiments: ExperimentSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ctx_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub min_payload: usize,
    pub max_payload: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Token budget per unfolded block.
    pub block_tokens: usize,
    /// SFT examples (unfolded turns) in the SFT shard.
    pub sft_turns: usize,
    /// SFT examples used for the frozen benchmark reference policy.
    pub reference_turns: usize,
    pub pair_prompts: usize,
    pub set_prompts: usize,
    pub bench_prompts: usize,
    pub multiturn_conversations: usize,
}

/// Optimizer and schedule settings for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub warmup_frac: f64,
    #[serde(default)]
    pub floor_lr: f64,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsSection {
    /// Sampling temperatures of the two responses.
    pub temperatures: [f64; 2],
    pub top_p: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub val_fraction: f64,
    /// Annotation label-noise rate.
    pub noise: f64,
    /// Drop pairs rated below this strength before reward modeling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_rating: Option<Rating>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetSection {
    pub pool_n: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub max_turns: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsSection {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub warmup_frac: f64,
    #[serde(default)]
    pub floor_lr: f64,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    pub rank_k: usize,
    /// Candidates per prompt considered when picking the rank-`k` response.
    pub pool_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoSection {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub warmup_frac: f64,
    #[serde(default)]
    pub floor_lr: f64,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    pub beta: f64,
    #[serde(default)]
    pub length_normalize: bool,
    /// Prompts sampled to estimate the policy's mean reward score.
    pub probe_prompts: usize,
    /// Fixed dispreferred rank; chosen by score matching when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected_rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub best_of: Vec<usize>,
    pub hist_bins: usize,
    pub hist_range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// SFT shard sizes for the data-scale sweep.
    pub scale_turns: Vec<usize>,
    /// Pool sizes for the candidate-count ablation.
    pub pool_sizes: Vec<usize>,
    /// Ranks for the selected-rank ablation; empty means 1, n/4, n/2, n.
    pub ranks: Vec<usize>,
    /// Rank offset around the selected dispreferred rank.
    pub reject_offset: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSection::default(),
            data: DataSection::default(),
            sft: StageSection {
                epochs: 3,
                lr: 3e-3,
                schedule: ScheduleKind::Cosine,
                warmup_steps: 0,
                warmup_frac: 0.05,
                floor_lr: 0.0,
                batch_size: 32,
                max_grad_norm: None,
            },
            pairs: PairsSection::default(),
            rm: StageSection {
                epochs: 2,
                lr: 5e-4,
                schedule: ScheduleKind::Cosine,
                warmup_steps: 0,
                warmup_frac: 0.03,
                floor_lr: 0.0,
                batch_size: 16,
                max_grad_norm: None,
            },
            set: SetSection::default(),
            rs: RsSection {
                epochs: 3,
                lr: 1e-3,
                schedule: ScheduleKind::Cosine,
                warmup_steps: 0,
                warmup_frac: 0.05,
                floor_lr: 0.0,
                batch_size: 32,
                max_grad_norm: None,
                rank_k: 1,
                pool_n: 64,
            },
            dpo: DpoSection {
                epochs: 2,
                lr: 1e-4,
                schedule: ScheduleKind::Linear,
                warmup_steps: 10,
                warmup_frac: 0.0,
                floor_lr: 0.0,
                batch_size: 32,
                max_grad_norm: None,
                beta: 0.1,
                length_normalize: false,
                probe_prompts: 500,
                rejected_rank: None,
            },
            eval: EvalSection::default(),
            experiments: ExperimentSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TransformerConfig::default();
        Self { d_model: t.d_model, n_layers: t.n_layers, n_heads: t.n_heads, ctx_len: t.ctx_len }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            min_payload: 3,
            max_payload: 10,
            min_turns: 1,
            max_turns: 1,
            block_tokens: 256,
            sft_turns: 16000,
            reference_turns: 4000,
            pair_prompts: 20000,
            set_prompts: 1000,
            bench_prompts: 500,
            multiturn_conversations: 100,
        }
    }
}

impl Default for PairsSection {
    fn default() -> Self {
        let p = PairBuildConfig::default();
        Self {
            temperatures: [p.temperatures.0, p.temperatures.1],
            top_p: p.top_p,
            top_k: p.top_k,
            max_new_tokens: p.max_new_tokens,
            val_fraction: p.val_fraction,
            noise: p.noise,
            min_rating: None,
        }
    }
}

impl Default for SetSection {
    fn default() -> Self {
        let g = GenParams::default();
        Self {
            pool_n: 64,
            temperature: g.temperature,
            top_p: g.top_p,
            top_k: g.top_k,
            max_new_tokens: g.max_new_tokens,
            max_turns: 3,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let g = GenParams::default();
        Self {
            temperature: g.temperature,
            top_p: g.top_p,
            top_k: g.top_k,
            max_new_tokens: g.max_new_tokens,
            best_of: crate::eval::BEST_OF_NS.to_vec(),
            hist_bins: 20,
            hist_range: [-4.0, 4.0],
        }
    }
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            scale_turns: vec![1000, 2000, 4000, 8000, 16000],
            pool_sizes: vec![2, 4, 8, 16, 32, 64],
            ranks: Vec::new(),
            reject_offset: 16,
        }
    }
}

macro_rules! stage_of {
    ($s:expr) => {
        StageSection {
            epochs: $s.epochs,
            lr: $s.lr,
            schedule: $s.schedule,
            warmup_steps: $s.warmup_steps,
            warmup_frac: $s.warmup_frac,
            floor_lr: $s.floor_lr,
            batch_size: $s.batch_size,
            max_grad_norm: $s.max_grad_norm,
        }
    };
}

impl RsSection {
    pub fn stage(&self) -> StageSection {
        stage_of!(self)
    }
}

impl DpoSection {
    pub fn stage(&self) -> StageSection {
        stage_of!(self)
    }
}

impl StageSection {
    pub fn warmup(&self) -> Warmup {
        if self.warmup_frac > 0.0 {
            Warmup::Fraction(self.warmup_frac)
        } else {
            Warmup::Steps(self.warmup_steps)
        }
    }

    pub fn train_config(&self, stage: StageKind, seed: u64) -> TrainConfig {
        let base = match stage {
            StageKind::Sft => TrainConfig::sft(),
            StageKind::Rm => TrainConfig::rm(),
            StageKind::Rs => TrainConfig::rs(),
            StageKind::Dpo => TrainConfig::dpo(),
        };
        TrainConfig {
            epochs: self.epochs,
            peak_lr: self.lr,
            schedule: self.schedule,
            warmup: self.warmup(),
            floor_lr: self.floor_lr,
            batch_size: self.batch_size,
            seed,
            max_grad_norm: self.max_grad_norm,
            ..base
        }
    }

    fn validate(&self, name: &str) -> Result<(), PipelineError> {
        if self.warmup_frac > 0.0 && self.warmup_steps > 0 {
            return Err(PipelineError::Config(format!("{name}: set warmup_steps or warmup_frac, not both")));
        }
        self.train_config(StageKind::Sft, 0).validate().map_err(|e| PipelineError::Config(format!("{name}: {e}")))
    }
}

mod seed_repr {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*seed) {
            Ok(v) => s.serialize_i64(v),
            Err(_) => s.serialize_str(&seed.to_string()),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(u64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(v) => Ok(v),
            Repr::Str(s) => s.trim().parse().map_err(|_| de::Error::custom(format!("invalid seed {s:?}"))),
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn gen(temperature: f64, top_p: f64, top_k: usize, max_new_tokens: usize, seed: u64) -> GenParams {
    GenParams { temperature, top_p, top_k, max_new_tokens, seed }
}

impl PipelineConfig {
    /// Parses a config file; keys it leaves out keep their default values.
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let err = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        let overlay: toml::Table = text.parse().map_err(|e| err(&e))?;
        let mut base = toml::Table::try_from(PipelineConfig::default()).map_err(|e| err(&e))?;
        merge(&mut base, overlay);
        let cfg: PipelineConfig = toml::Value::Table(base).try_into().map_err(|e| err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.transformer().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let d = &self.data;
        if d.min_turns == 0 || d.min_turns > d.max_turns {
            return bad(format!("data turns range {}..={}", d.min_turns, d.max_turns));
        }
        if d.min_payload == 0 || d.min_payload > d.max_payload {
            return bad(format!("data payload range {}..={}", d.min_payload, d.max_payload));
        }
        if d.sft_turns == 0
            || d.reference_turns == 0
            || d.pair_prompts == 0
            || d.set_prompts == 0
            || d.bench_prompts == 0
        {
            return bad("data shard sizes must be positive".into());
        }
        if d.reference_turns > d.sft_turns {
            return bad(format!("reference_turns {} exceeds sft_turns {}", d.reference_turns, d.sft_turns));
        }
        for (name, s) in
            [("sft", self.sft.clone()), ("rm", self.rm.clone()), ("rs", self.rs.stage()), ("dpo", self.dpo.stage())]
        {
            s.validate(name)?;
        }
        if self.set.pool_n < 2 {
            return bad(format!("set.pool_n {} < 2", self.set.pool_n));
        }
        if self.rs.pool_n == 0
            || self.rs.pool_n > self.set.pool_n
            || self.rs.rank_k == 0
            || self.rs.rank_k > self.rs.pool_n
        {
            return bad(format!(
                "rs.rank_k {} / rs.pool_n {} with set.pool_n {}",
                self.rs.rank_k, self.rs.pool_n, self.set.pool_n
            ));
        }
        if !(self.dpo.beta > 0.0) || self.dpo.probe_prompts == 0 {
            return bad("dpo.beta and dpo.probe_prompts must be positive".into());
        }
        if let Some(r) = self.dpo.rejected_rank {
            if r < 2 || r > self.set.pool_n {
                return bad(format!("dpo.rejected_rank {r} outside 2..={}", self.set.pool_n));
            }
        }
        for g in [self.pair_gen(0, 0), self.pair_gen(1, 0), self.set_gen(), self.eval_gen()] {
            g.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if !(0.0..=0.5).contains(&self.pairs.val_fraction) || !(0.0..=1.0).contains(&self.pairs.noise) {
            return bad("pairs.val_fraction in [0, 0.5] and pairs.noise in [0, 1]".into());
        }
        let e = &self.eval;
        if e.best_of.is_empty() || e.best_of.iter().any(|&n| n == 0 || n > self.set.pool_n) {
            return bad(format!("eval.best_of entries must be in 1..={}", self.set.pool_n));
        }
        if e.hist_bins == 0 || !(e.hist_range[0] < e.hist_range[1]) {
            return bad("eval histogram needs bins > 0 and an increasing range".into());
        }
        let x = &self.experiments;
        if x.scale_turns.contains(&0) || x.pool_sizes.iter().any(|&n| n == 0 || n > self.set.pool_n) {
            return bad("experiments sizes must be positive and within set.pool_n".into());
        }
        if x.ranks.iter().any(|&k| k == 0 || k > self.set.pool_n) {
            return bad("experiments.ranks must be within the pool".into());
        }
        Ok(())
    }

    pub fn transformer(&self) -> TransformerConfig {
        let m = &self.model;
        TransformerConfig {
            vocab_size: VOCAB_SIZE,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ctx_len: m.ctx_len,
            ..TransformerConfig::default()
        }
    }

    pub fn taskgen(&self) -> TaskGenConfig {
        TaskGenConfig { min_payload: self.data.min_payload, max_payload: self.data.max_payload }
    }

    pub fn turns_range(&self) -> (usize, usize) {
        (self.data.min_turns, self.data.max_turns)
    }

    fn pair_gen(&self, which: usize, seed: u64) -> GenParams {
        let p = &self.pairs;
        gen(p.temperatures[which], p.top_p, p.top_k, p.max_new_tokens, seed)
    }

    pub fn pair_build(&self, seed: u64) -> PairBuildConfig {
        let p = &self.pairs;
        PairBuildConfig {
            temperatures: (p.temperatures[0], p.temperatures[1]),
            top_p: p.top_p,
            top_k: p.top_k,
            max_new_tokens: p.max_new_tokens,
            val_fraction: p.val_fraction,
            noise: p.noise,
            seed,
        }
    }

    pub fn set_gen(&self) -> GenParams {
        let s = &self.set;
        gen(s.temperature, s.top_p, s.top_k, s.max_new_tokens, 0)
    }

    pub fn ranked_build(&self, seed: u64) -> RankedBuildConfig {
        RankedBuildConfig {
            pool_n: self.set.pool_n,
            gen: self.set_gen().with_seed(seed),
            max_turns: self.set.max_turns,
        }
    }

    pub fn eval_gen(&self) -> GenParams {
        let e = &self.eval;
        gen(e.temperature, e.top_p, e.top_k, e.max_new_tokens, 0)
    }

    pub fn rs_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            rs_rank_k: self.rs.rank_k,
            rs_pool_n: self.rs.pool_n,
            ..self.rs.stage().train_config(StageKind::Rs, seed)
        }
    }

    pub fn dpo_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            dpo_beta: self.dpo.beta,
            dpo_length_normalize: self.dpo.length_normalize,
            dpo_probe_prompts: self.dpo.probe_prompts,
            ..self.dpo.stage().train_config(StageKind::Dpo, seed)
        }
    }

    /// Ranks for the selected-rank ablation.
    pub fn ablation_ranks(&self) -> Vec<usize> {
        if !self.experiments.ranks.is_empty() {
            return self.experiments.ranks.clone();
        }
        let n = self.set.pool_n;
        let mut r = vec![1, (n / 4).max(1), (n / 2).max(1), n];
        r.dedup();
        r
    }
}
