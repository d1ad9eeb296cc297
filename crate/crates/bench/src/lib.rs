//! Shared fixtures for the benchmarks.

use deskalign::datasets::{unfold_all, PromptInstance};
use deskalign::taskgen::{gen_conversations, TaskGenConfig};
use deskalign::TransformerConfig;

/// Desk-scale model shape.
pub fn desk_model() -> TransformerConfig {
    TransformerConfig::default()
}

/// Single-turn prompts drawn from the default task distribution.
pub fn prompts(n: usize, seed: u64) -> Vec<PromptInstance> {
    let convs = gen_conversations(n, (1, 1), &TaskGenConfig::default(), seed).expect("valid task config");
    unfold_all(&convs, desk_model().ctx_len)
}
