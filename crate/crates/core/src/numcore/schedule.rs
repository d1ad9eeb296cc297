use serde::{Deserialize, Serialize};

use super::NumError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Warmup {
    Steps(usize),
    Fraction(f64),
}

/// Linear warmup to `peak_lr`, then cosine or linear decay to `floor_lr`
/// at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub warmup: Warmup,
    pub total_steps: usize,
    pub floor_lr: f64,
}

impl LrSchedule {
    pub fn cosine(peak_lr: f64, warmup: Warmup, total_steps: usize) -> Self {
        Self { kind: ScheduleKind::Cosine, peak_lr, warmup, total_steps, floor_lr: 0.0 }
    }

    pub fn linear(peak_lr: f64, warmup: Warmup, total_steps: usize) -> Self {
        Self { kind: ScheduleKind::Linear, peak_lr, warmup, total_steps, floor_lr: 0.0 }
    }

    pub fn warmup_steps(&self) -> usize {
        let w = match self.warmup {
            Warmup::Steps(s) => s,
            Warmup::Fraction(f) => (f * self.total_steps as f64).round() as usize,
        };
        w.min(self.total_steps)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64, NumError> {
        if step > self.total_steps {
            return Err(NumError::StepOutOfRange { step, total: self.total_steps });
        }
        let w = self.warmup_steps();
        if step < w {
            return Ok(self.peak_lr * step as f64 / w as f64);
        }
        let span = self.total_steps - w;
        if span == 0 {
            return Ok(self.peak_lr);
        }
        let progress = (step - w) as f64 / span as f64;
        let range = self.peak_lr - self.floor_lr;
        Ok(match self.kind {
            ScheduleKind::Cosine => self.floor_lr + range * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
            ScheduleKind::Linear => self.peak_lr - range * progress,
        })
    }
}
