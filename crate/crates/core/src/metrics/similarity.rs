use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::gateway::TokenEmbeddings;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SimilarityScore {
    fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        SimilarityScore { precision, recall, f1 }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check(e: &TokenEmbeddings, which: &'static str) -> Result<usize, MetricError> {
    if e.vectors.is_empty() || e.tokens.len() != e.vectors.len() {
        return Err(MetricError::EmptyTokens(which));
    }
    let dim = e.vectors[0].len();
    if e.vectors.iter().any(|v| v.len() != dim) {
        return Err(MetricError::DimensionMismatch);
    }
    Ok(dim)
}

/// For each row of `sim`, its maximum.
fn row_max(sim: &[Vec<f64>]) -> Vec<f64> {
    sim.iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Greedy token matching. Vectors are expected to be unit-normalized, so the
/// dot product is the cosine similarity.
pub fn greedy_match_score(cand: &TokenEmbeddings, reference: &TokenEmbeddings) -> Result<SimilarityScore, MetricError> {
    let nc = cand.vectors.len();
    let nr = reference.vectors.len();
    greedy_match_weighted(cand, reference, &vec![1.0; nc], &vec![1.0; nr])
}

/// Greedy matching with per-token weights (e.g. IDF). Precision and recall
/// become weighted means of the per-token maxima.
pub fn greedy_match_weighted(
    cand: &TokenEmbeddings,
    reference: &TokenEmbeddings,
    cand_weights: &[f64],
    ref_weights: &[f64],
) -> Result<SimilarityScore, MetricError> {
    let dc = check(cand, "candidate")?;
    let dr = check(reference, "reference")?;
    if dc != dr {
        return Err(MetricError::DimensionMismatch);
    }
    if cand_weights.len() != cand.vectors.len() || ref_weights.len() != reference.vectors.len() {
        return Err(MetricError::LengthMismatch(cand_weights.len(), ref_weights.len()));
    }
    let sim: Vec<Vec<f64>> = cand
        .vectors
        .iter()
        .map(|c| reference.vectors.iter().map(|r| dot(c, r)).collect())
        .collect();
    let transposed: Vec<Vec<f64>> = (0..reference.vectors.len())
        .map(|j| sim.iter().map(|row| row[j]).collect())
        .collect();
    let weighted_mean = |vals: Vec<f64>, w: &[f64]| {
        let total: f64 = w.iter().sum();
        vals.iter().zip(w).map(|(v, w)| v * w).sum::<f64>() / total
    };
    let precision = weighted_mean(row_max(&sim), cand_weights);
    let recall = weighted_mean(row_max(&transposed), ref_weights);
    Ok(SimilarityScore::from_pr(precision, recall))
}
