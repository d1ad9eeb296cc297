//! Desk-scale alignment pipeline: a tiny decoder-only transformer trained
//! with supervised finetuning, a Bradley-Terry reward model, rejection
//! sampling finetuning and direct preference optimization on a synthetic
//! instruction-following task judged by a deterministic oracle.

pub mod datasets;
pub mod digest;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod sampling;
pub mod seeding;
pub mod taskgen;
pub mod trainers;
pub mod vocab;

pub use datasets::{Conversation, PreferencePair, PromptInstance, RankedRecord};
pub use model::{Checkpoint, PolicyModel, RewardModel, Stage, TransformerConfig};
pub use numcore::Tensor;
pub use sampling::{Candidate, GenParams};
pub use taskgen::{OracleVerdict, Rating, TaskInstance};
pub use trainers::TrainConfig;
