use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Conversation, PreferencePair, Split};
use crate::taskgen::Rating;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub total: usize,
    pub train: usize,
    pub val: usize,
    /// Row count per rating, in rating order.
    pub by_rating: Vec<(Rating, usize)>,
    pub rating_fraction: Vec<(Rating, f64)>,
    /// Number of pairs by turn depth of the prompt.
    pub depth_histogram: BTreeMap<usize, usize>,
    pub mean_margin: f64,
}

pub fn pair_stats(pairs: &[PreferencePair]) -> PairStats {
    let total = pairs.len();
    let by_rating: Vec<(Rating, usize)> =
        Rating::ALL.iter().map(|&r| (r, pairs.iter().filter(|p| p.rating == r).count())).collect();
    let rating_fraction =
        by_rating.iter().map(|&(r, c)| (r, if total == 0 { 0.0 } else { c as f64 / total as f64 })).collect();
    let mut depth_histogram = BTreeMap::new();
    for p in pairs {
        *depth_histogram.entry(p.prompt.depth).or_insert(0) += 1;
    }
    let train = pairs.iter().filter(|p| p.split == Split::Train).count();
    PairStats {
        total,
        train,
        val: total - train,
        by_rating,
        rating_fraction,
        depth_histogram,
        mean_margin: if total == 0 { 0.0 } else { pairs.iter().map(|p| p.margin).sum::<f64>() / total as f64 },
    }
}

/// Conversations per number of turns.
pub fn turns_histogram(convs: &[Conversation]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for c in convs {
        *h.entry(c.num_turns()).or_insert(0) += 1;
    }
    h
}
