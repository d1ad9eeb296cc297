use serde::{Deserialize, Serialize};

use super::TaskInstance;
use crate::seeding::{derive_seed, hash_tokens, unit_from_hash};
use crate::vocab::{Token, EOS};

/// Strength of an annotated preference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rating {
    Significantly,
    Better,
    Slightly,
    Negligibly,
}

/// Lower bounds on `|reward_a - reward_b|` for each rating, strongest first.
pub const RATING_THRESHOLDS: [(Rating, f64); 4] =
    [(Rating::Significantly, 0.50), (Rating::Better, 0.25), (Rating::Slightly, 0.10), (Rating::Negligibly, 0.0)];

impl Rating {
    pub const ALL: [Rating; 4] = [Rating::Significantly, Rating::Better, Rating::Slightly, Rating::Negligibly];

    pub fn from_margin(margin: f64) -> Rating {
        let m = margin.abs();
        RATING_THRESHOLDS.iter().find(|(_, lo)| m >= *lo).map_or(Rating::Negligibly, |(r, _)| *r)
    }

    pub fn name(self) -> &'static str {
        match self {
            Rating::Significantly => "significantly",
            Rating::Better => "better",
            Rating::Slightly => "slightly",
            Rating::Negligibly => "negligibly",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub reward_a: f64,
    pub reward_b: f64,
    pub winner: Side,
    pub rating: Rating,
    pub reason: String,
}

impl OracleVerdict {
    /// The same judgement with the argument order reversed.
    pub fn mirrored(&self) -> OracleVerdict {
        OracleVerdict {
            reward_a: self.reward_b,
            reward_b: self.reward_a,
            winner: self.winner.other(),
            rating: self.rating,
            reason: mirror_reason(&self.reason),
        }
    }
}

fn content(response: &[Token]) -> &[Token] {
    let end = response.iter().position(|&t| t == EOS).unwrap_or(response.len());
    &response[..end]
}

pub fn levenshtein(a: &[Token], b: &[Token]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn distance(instance: &TaskInstance, response: &[Token]) -> (usize, usize) {
    let r = content(response);
    (levenshtein(r, &instance.gold), r.len().max(instance.gold.len()))
}

/// Quality in `[-1, 1]`: `2·(1 − lev/max_len) − 1` against the gold answer.
///
/// Tokens from the first end-of-sequence onward are ignored.
pub fn oracle_reward(instance: &TaskInstance, response: &[Token]) -> f64 {
    let (d, n) = distance(instance, response);
    if n == 0 {
        return 1.0;
    }
    (2.0 * (1.0 - d as f64 / n as f64) - 1.0).clamp(-1.0, 1.0)
}

fn mirror_reason(reason: &str) -> String {
    let field = |key: &str| reason.split(' ').find_map(|kv| kv.strip_prefix(key)).unwrap_or_default().to_string();
    format_reason(&field("task="), &field("lev_b="), &field("lev_a="), &field("gold_len="))
}

fn format_reason(task: &str, lev_a: &str, lev_b: &str, gold_len: &str) -> String {
    format!("task={task} lev_a={lev_a} lev_b={lev_b} gold_len={gold_len}")
}

/// Pairwise preference with a four-level rating.
///
/// `seed` should already identify the pair. Exact reward ties are broken by
/// a hash over the seed and the two responses taken in canonical order, so
/// swapping the arguments never changes which response wins. With
/// `noise > 0` the winner is flipped with that probability, again decided
/// by the seed alone.
pub fn oracle_annotate(
    instance: &TaskInstance,
    resp_a: &[Token],
    resp_b: &[Token],
    seed: u64,
    noise: f64,
) -> OracleVerdict {
    let (da, _) = distance(instance, resp_a);
    let (db, _) = distance(instance, resp_b);
    let reward_a = oracle_reward(instance, resp_a);
    let reward_b = oracle_reward(instance, resp_b);
    let mut winner = if reward_a > reward_b {
        Side::A
    } else if reward_b > reward_a {
        Side::B
    } else {
        let (ha, hb) = (hash_tokens(resp_a), hash_tokens(resp_b));
        let (lo, hi) = if resp_a <= resp_b { (ha, hb) } else { (hb, ha) };
        let pick_smaller = derive_seed(&[seed, lo, hi]) & 1 == 0;
        match (resp_a.cmp(resp_b), pick_smaller) {
            (std::cmp::Ordering::Equal, true) => Side::A,
            (std::cmp::Ordering::Equal, false) => Side::B,
            (std::cmp::Ordering::Less, true) | (std::cmp::Ordering::Greater, false) => Side::A,
            _ => Side::B,
        }
    };
    if noise > 0.0 && unit_from_hash(derive_seed(&[seed, 0x0F11_9000])) < noise {
        winner = winner.other();
    }
    OracleVerdict {
        reward_a,
        reward_b,
        winner,
        rating: Rating::from_margin(reward_a - reward_b),
        reason: format_reason(instance.kind.name(), &da.to_string(), &db.to_string(), &instance.gold.len().to_string()),
    }
}

/// 1.0 if `response` beats `reference` under the oracle, 0.5 on a tie.
pub fn judge_win(instance: &TaskInstance, response: &[Token], reference: &[Token]) -> f64 {
    let (r, r_ref) = (oracle_reward(instance, response), oracle_reward(instance, reference));
    if r > r_ref {
        1.0
    } else if r == r_ref {
        0.5
    } else {
        0.0
    }
}
