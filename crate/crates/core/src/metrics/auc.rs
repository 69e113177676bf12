use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::corpus::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Positive/negative pairs with equal scores (each credited one half).
    pub tied_pairs: u64,
}

/// Rank-based binary AUC (Mann-Whitney U with midranks for ties).
pub fn binary_auc(scores: &[f64], labels: &[Label]) -> Result<AucResult, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(MetricError::NonFinite(*bad));
    }
    let positives = labels.iter().filter(|l| l.is_like()).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of positive ranks, ranks doubled so midranks stay integral.
    let mut pos_rank_sum2: u128 = 0;
    let mut tied_pairs: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank (i + 1 + j) / 2
        let mid2 = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k].is_like()).count();
        pos_rank_sum2 += mid2 * pos_in_group as u128;
        tied_pairs += (pos_in_group * (j - i - pos_in_group)) as u64;
        i = j;
    }

    let p = positives as u128;
    // U = R_pos - P(P+1)/2, all doubled
    let u2 = pos_rank_sum2 - p * (p + 1);
    let auc = u2 as f64 / (2.0 * positives as f64 * negatives as f64);
    Ok(AucResult {
        auc,
        positives,
        negatives,
        tied_pairs,
    })
}
