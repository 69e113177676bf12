//! Evaluation metrics: binary AUC, greedy token-matching similarity, and
//! run reports.

mod auc;
mod report;
mod similarity;

pub use auc::{binary_auc, AucResult};
pub use report::{aggregate_report, summarize, Report, ReportRow};
pub use similarity::{greedy_match_score, greedy_match_weighted, SimilarityScore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("AUC undefined: {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("score is not a number: {0}")]
    NonFinite(f64),
    #[error("undefined score: {0} has no tokens")]
    EmptyTokens(&'static str),
    #[error("token vectors differ in dimension")]
    DimensionMismatch,
    #[error("no records to report")]
    NoRecords,
}
