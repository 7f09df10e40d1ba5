//! Rank-based AUC over recall scores.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::scalar::Score;

/// Positive and negative scores for one ranking problem.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "S: Score")]
pub struct LabeledScores<S> {
    pub positives: Vec<S>,
    pub negatives: Vec<S>,
}

impl<S: Score> LabeledScores<S> {
    pub fn push(&mut self, score: S, positive: bool) {
        if positive {
            self.positives.push(score);
        } else {
            self.negatives.push(score);
        }
    }

    pub fn extend(&mut self, other: &Self) {
        self.positives.extend_from_slice(&other.positives);
        self.negatives.extend_from_slice(&other.negatives);
    }

    pub fn auc(&self) -> Option<S> {
        mann_whitney_auc(&self.positives, &self.negatives)
    }
}

/// P(score(pos) > score(neg)) with ties counted half, or `None` when either
/// class is empty. Runs in O(n log n).
pub fn mann_whitney_auc<S: Score>(positives: &[S], negatives: &[S]) -> Option<S> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(S, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    // Twice the U statistic, kept integral so the result is one division.
    let mut twice_u: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    let pairs = 2 * positives.len() as u128 * negatives.len() as u128;
    Some(S::from_u128(twice_u)? / S::from_u128(pairs)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AucPooling {
    /// One ranking over all (question, item) pairs.
    #[default]
    Pooled,
    /// Mean of per-question AUCs, skipping undefined ones.
    Macro,
}

pub fn pooled_auc<S: Score>(groups: &[LabeledScores<S>], pooling: AucPooling) -> Option<S> {
    match pooling {
        AucPooling::Pooled => {
            let mut all = LabeledScores::default();
            for g in groups {
                all.extend(g);
            }
            all.auc()
        }
        AucPooling::Macro => {
            let values: Vec<S> = groups.iter().filter_map(LabeledScores::auc).collect();
            if values.is_empty() {
                return None;
            }
            let sum = values.iter().fold(S::zero(), |acc, &v| acc + v);
            Some(sum / S::from_usize(values.len())?)
        }
    }
}
