use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{binary_auc, MetricError};
use crate::fsutil::write_atomic;
use crate::harness::{EvalRecord, ParseStatus, ScoreSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `None` when the scored records hold a single class.
    pub auc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    pub tied_pairs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_recall: Option<f64>,
    pub similarity_n: usize,
    pub parse_fail_rate: f64,
    /// Share of scored records whose score came from the parsed label.
    pub score_fallback_rate: f64,
    pub n: usize,
    pub variant: String,
    pub k_shot: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub overall: ReportRow,
    /// One row per (variant, task) present in the records.
    pub runs: Vec<ReportRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// One report row over `records`. Failed parses are excluded from AUC and
/// counted in `parse_fail_rate`.
pub fn summarize(records: &[EvalRecord], variant: &str, k_shot: Option<usize>, seed: Option<u64>) -> Result<ReportRow, MetricError> {
    if records.is_empty() {
        return Err(MetricError::NoRecords);
    }
    let scored: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| r.parse_status != ParseStatus::Failed && r.score.is_some())
        .collect();
    let scores: Vec<f64> = scored.iter().map(|r| r.score.expect("filtered")).collect();
    let labels: Vec<_> = scored.iter().map(|r| r.gold).collect();
    let positives = labels.iter().filter(|l| l.is_like()).count();
    let (auc, tied_pairs) = match binary_auc(&scores, &labels) {
        Ok(r) => (Some(r.auc), r.tied_pairs),
        Err(MetricError::SingleClass { .. }) => (None, 0),
        Err(e) => return Err(e),
    };
    let sims: Vec<_> = records.iter().filter_map(|r| r.similarity).collect();
    let failed = records.iter().filter(|r| r.parse_status == ParseStatus::Failed).count();
    let fallback = scored
        .iter()
        .filter(|r| r.score_source == Some(ScoreSource::LabelFallback))
        .count();
    Ok(ReportRow {
        auc,
        positives,
        negatives: scored.len() - positives,
        tied_pairs,
        mean_f1: mean(&sims.iter().map(|s| s.f1).collect::<Vec<_>>()),
        mean_precision: mean(&sims.iter().map(|s| s.precision).collect::<Vec<_>>()),
        mean_recall: mean(&sims.iter().map(|s| s.recall).collect::<Vec<_>>()),
        similarity_n: sims.len(),
        parse_fail_rate: failed as f64 / records.len() as f64,
        score_fallback_rate: if scored.is_empty() { 0.0 } else { fallback as f64 / scored.len() as f64 },
        n: records.len(),
        variant: variant.to_string(),
        k_shot,
        seed,
    })
}

/// Overall row plus one row per (variant, task) group.
pub fn aggregate_report(records: &[EvalRecord], k_shot: Option<usize>, seed: Option<u64>) -> Result<Report, MetricError> {
    let overall = summarize(records, "all", k_shot, seed)?;
    let mut groups: BTreeMap<(String, String), Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.variant.clone(), r.task.to_string()))
            .or_default()
            .push(r.clone());
    }
    let runs = groups
        .into_iter()
        .map(|((variant, task), rs)| summarize(&rs, &format!("{variant}:{task}"), k_shot, seed))
        .collect::<Result<_, _>>()?;
    Ok(Report { overall, runs })
}

const CSV_COLUMNS: [&str; 16] = [
    "row", "auc", "positives", "negatives", "mean_f1", "mean_precision", "mean_recall", "parse_fail_rate", "n",
    "variant", "k_shot", "seed", "tied_pairs", "similarity_n", "score_fallback_rate", "",
];

fn csv_field(s: String) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Report {
    pub fn to_csv(&self) -> String {
        let header: Vec<&str> = CSV_COLUMNS.iter().copied().filter(|c| !c.is_empty()).collect();
        let mut out = header.join(",");
        out.push('\n');
        let rows = std::iter::once(("overall", &self.overall)).chain(self.runs.iter().map(|r| ("run", r)));
        for (kind, r) in rows {
            let fields = [
                kind.to_string(),
                opt(r.auc),
                r.positives.to_string(),
                r.negatives.to_string(),
                opt(r.mean_f1),
                opt(r.mean_precision),
                opt(r.mean_recall),
                r.parse_fail_rate.to_string(),
                r.n.to_string(),
                r.variant.clone(),
                opt(r.k_shot),
                opt(r.seed),
                r.tied_pairs.to_string(),
                r.similarity_n.to_string(),
                r.score_fallback_rate.to_string(),
            ];
            out.push_str(&fields.into_iter().map(csv_field).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(&dir.join("report.json"), &json)?;
        write_atomic(&dir.join("report.csv"), self.to_csv().as_bytes())
    }
}
