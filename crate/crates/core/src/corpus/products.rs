//! Line-delimited product review and metadata records (Amazon review dump layout).

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use super::movies::read_lines;
use super::{
    assemble, binarize, CorpusError, DatasetKind, IngestReport, Ingested, Interaction, ItemId,
    ItemRecord, Rating,
};

fn text_field(v: Option<&Value>) -> Option<String> {
    match v? {
        Value::String(s) => {
            let s = s.trim();
            (!s.is_empty()).then(|| s.to_string())
        }
        Value::Number(n) => Some(n.to_string()),
        // older dumps store descriptions as a list of paragraphs
        Value::Array(parts) => {
            let joined = parts
                .iter()
                .filter_map(|p| p.as_str())
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            (!joined.is_empty()).then_some(joined)
        }
        _ => None,
    }
}

fn parse_metadata(path: &Path) -> Result<BTreeMap<ItemId, ItemRecord>, CorpusError> {
    let mut catalog = BTreeMap::new();
    for (idx, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Value =
            serde_json::from_str(line).map_err(|e| CorpusError::malformed(path, idx + 1, e.to_string()))?;
        let Some(asin) = text_field(rec.get("asin")) else {
            log::warn!("{}:{}: metadata record without asin skipped", path.display(), idx + 1);
            continue;
        };
        let mut metadata = BTreeMap::new();
        for key in ["brand", "price", "description"] {
            if let Some(v) = text_field(rec.get(key)) {
                metadata.insert(key.to_string(), v);
            }
        }
        let title = text_field(rec.get("title")).unwrap_or_else(|| asin.clone());
        catalog.entry(asin.clone()).or_insert(ItemRecord {
            item_id: asin,
            title,
            metadata,
            reviews: Vec::new(),
            description: None,
        });
    }
    Ok(catalog)
}

pub fn parse_product_dataset(reviews_file: &Path, metadata_file: &Path, threshold: u8) -> Result<Ingested, CorpusError> {
    if !(1..=5).contains(&threshold) {
        return Err(CorpusError::ThresholdOutOfRange(threshold as i64));
    }
    let catalog = parse_metadata(metadata_file)?;
    let mut report = IngestReport::default();
    let mut interactions = Vec::new();

    for (idx, line) in read_lines(reviews_file)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let rec: Value = serde_json::from_str(line)
            .map_err(|e| CorpusError::malformed(reviews_file, idx + 1, e.to_string()))?;
        let user = text_field(rec.get("reviewerID"));
        let item = text_field(rec.get("asin"));
        let overall = rec.get("overall").and_then(Value::as_f64);
        let (Some(user_id), Some(item_id), Some(overall)) = (user, item, overall) else {
            log::warn!(
                "{}:{}: review without reviewerID/asin/overall skipped",
                reviews_file.display(),
                idx + 1
            );
            report.skipped_records += 1;
            continue;
        };
        let stars = overall.trunc();
        if stars != overall {
            log::warn!("{}:{}: fractional rating {overall} truncated", reviews_file.display(), idx + 1);
            report.truncated_ratings += 1;
        }
        let Ok(raw_rating) = Rating::new(stars as i64) else {
            log::warn!("{}:{}: rating {overall} out of range, skipped", reviews_file.display(), idx + 1);
            report.skipped_records += 1;
            continue;
        };
        let timestamp = match rec.get("unixReviewTime").and_then(Value::as_i64) {
            Some(t) if t >= 0 => t,
            _ => {
                report.missing_timestamps += 1;
                0
            }
        };
        let review_text = text_field(rec.get("reviewText")).or_else(|| text_field(rec.get("summary")));
        interactions.push(Interaction {
            user_id,
            item_id,
            raw_rating,
            label: binarize(raw_rating, threshold)?,
            timestamp,
            review_text,
        });
    }

    let corpus = assemble(DatasetKind::Products, threshold, interactions, catalog, &mut report);
    corpus.validate()?;
    Ok(Ingested { corpus, report })
}
