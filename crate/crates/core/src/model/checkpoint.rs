//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic        4  bytes  "DSAL"
//! version      u32
//! payload_len  u64       bytes between this field and the digest
//! payload:
//!   head_mode  u8        0 = lm, 1 = reward
//!   vocab_size, d_model, n_layers, n_heads, ctx_len   u32 each
//!   stage      u8        0 pretrain, 1 sft, 2 rs, 3 dpo, 4 rm
//!   seed       u64
//!   steps      u64
//!   n_params   u32
//!   n_params × { name_len u16, name utf-8, rank u8, dims u32 × rank, values f32 × Πdims }
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::transformer::{HeadMode, Transformer, TransformerConfig};
use crate::numcore::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DSAL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("checkpoint digest mismatch")]
    DigestMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint stage {found:?} where {expected} was required")]
    StageMismatch { expected: String, found: Stage },
    #[error("checkpoint head {found:?} where {expected:?} was required")]
    HeadMismatch { expected: HeadMode, found: HeadMode },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Sft,
    Rs,
    Dpo,
    Rm,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Pretrain => 0,
            Stage::Sft => 1,
            Stage::Rs => 2,
            Stage::Dpo => 3,
            Stage::Rm => 4,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [Stage::Pretrain, Stage::Sft, Stage::Rs, Stage::Dpo, Stage::Rm].into_iter().find(|s| s.code() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Rs => "rs",
            Stage::Dpo => "dpo",
            Stage::Rm => "rm",
        }
    }
}

/// A model plus its provenance metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: Transformer,
    pub stage: Stage,
    pub seed: u64,
    pub steps: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        let c = &self.net.config;
        p.push(match c.head_mode {
            HeadMode::Lm => 0,
            HeadMode::Reward => 1,
        });
        for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.ctx_len] {
            p.extend_from_slice(&(v as u32).to_le_bytes());
        }
        p.push(self.stage.code());
        p.extend_from_slice(&self.seed.to_le_bytes());
        p.extend_from_slice(&self.steps.to_le_bytes());
        p.extend_from_slice(&(self.net.params.len() as u32).to_le_bytes());
        for (name, t) in self.net.params.iter() {
            p.extend_from_slice(&(name.len() as u16).to_le_bytes());
            p.extend_from_slice(name.as_bytes());
            p.push(t.rank() as u8);
            for &d in t.shape() {
                p.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                p.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(p.len() + 48);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&p);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated { need: 16, have: bytes.len() });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let payload_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let need = 16usize.saturating_add(payload_len).saturating_add(32);
        if bytes.len() < need {
            return Err(CheckpointError::Truncated { need, have: bytes.len() });
        }
        if bytes.len() > need {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - need)));
        }
        let body_end = 16 + payload_len;
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(CheckpointError::DigestMismatch);
        }
        let mut r = Reader { buf: &bytes[16..body_end], pos: 0 };
        let head_mode = match r.u8()? {
            0 => HeadMode::Lm,
            1 => HeadMode::Reward,
            x => return Err(CheckpointError::Malformed(format!("head mode {x}"))),
        };
        let dims: Vec<usize> = (0..5).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_, _>>()?;
        let config = TransformerConfig {
            vocab_size: dims[0],
            d_model: dims[1],
            n_layers: dims[2],
            n_heads: dims[3],
            ctx_len: dims[4],
            head_mode,
        };
        config.validate().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let stage_code = r.u8()?;
        let stage =
            Stage::from_code(stage_code).ok_or_else(|| CheckpointError::Malformed(format!("stage {stage_code}")))?;
        let seed = r.u64()?;
        let steps = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("parameter name is not utf-8".into()))?;
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_, _>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            params.insert(name, t);
        }
        if r.pos != r.buf.len() {
            return Err(CheckpointError::Malformed("unread payload bytes".into()));
        }
        let reference = Transformer::new(config, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if reference.params.len() != params.len()
            || reference.params.iter().zip(params.iter()).any(|((a, x), (b, y))| a != b || x.shape() != y.shape())
        {
            return Err(CheckpointError::Malformed("parameter set does not match config".into()));
        }
        Ok(Checkpoint { net: Transformer { config, params }, stage, seed, steps })
    }

    /// SHA-256 of the serialized checkpoint, lowercase hex.
    pub fn digest_hex(&self) -> String {
        crate::digest::sha256_hex(&self.to_bytes())
    }

    pub fn expect_stage(&self, allowed: &[Stage]) -> Result<(), CheckpointError> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            let expected = allowed.iter().map(|s| s.name()).collect::<Vec<_>>().join("|");
            Err(CheckpointError::StageMismatch { expected, found: self.stage })
        }
    }

    pub fn expect_head(&self, head: HeadMode) -> Result<(), CheckpointError> {
        if self.net.config.head_mode == head {
            Ok(())
        } else {
            Err(CheckpointError::HeadMismatch { expected: head, found: self.net.config.head_mode })
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Malformed(format!("field runs past payload at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
