//! Tensors, reverse-mode autodiff, AdamW and learning-rate schedules.

mod optim;
mod params;
mod scalar;
mod schedule;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use schedule::{LrSchedule, ScheduleKind, Warmup};
pub use tape::{log_sigmoid, sigmoid, softmax_rows, Gradients, SeqLayout, Tape, Var, LN_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NumericFault { op: &'static str },
    #[error("index {index} out of range {bound} in {op}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable is not on this tape")]
    UnknownVar,
    #[error("schedule step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid optimizer input: {0}")]
    Invalid(String),
}

/// Cross-entropy `-Σ p·ln q` between two distributions; terms with `p = 0`
/// contribute nothing.
pub fn cross_entropy_probs<T: Scalar>(p: &[T], q: &[T]) -> T {
    let mut h = T::ZERO;
    for (&a, &b) in p.iter().zip(q) {
        if a > T::ZERO {
            h -= a * b.ln();
        }
    }
    h
}
