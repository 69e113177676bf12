//! `::`-delimited movie rating files (MovieLens 1M layout).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{
    assemble, binarize, CorpusError, DatasetKind, IngestReport, Ingested, Interaction, ItemId,
    ItemRecord, Rating,
};

/// Reads a text file line by line. Lines that are not valid UTF-8 are decoded
/// as Latin-1, which is what the public MovieLens dumps use.
pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = std::fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    Ok(bytes
        .split(|&b| b == b'\n')
        .map(|raw| {
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            match std::str::from_utf8(raw) {
                Ok(s) => s.to_string(),
                Err(_) => raw.iter().map(|&b| b as char).collect(),
            }
        })
        .collect())
}

#[derive(Deserialize)]
struct PlotRecord {
    item_id: serde_json::Value,
    plot: String,
}

fn id_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Splits "Toy Story (1995)" into ("Toy Story", Some("1995")).
fn split_title_year(raw: &str) -> (String, Option<String>) {
    let trimmed = raw.trim();
    if let Some(open) = trimmed.rfind(" (") {
        let tail = &trimmed[open + 2..];
        if let Some(year) = tail.strip_suffix(')') {
            if year.len() == 4 && year.chars().all(|c| c.is_ascii_digit()) {
                return (trimmed[..open].to_string(), Some(year.to_string()));
            }
        }
    }
    (trimmed.to_string(), None)
}

fn parse_movies(path: &Path) -> Result<BTreeMap<ItemId, ItemRecord>, CorpusError> {
    let mut catalog = BTreeMap::new();
    for (idx, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 3 {
            return Err(CorpusError::malformed(
                path,
                idx + 1,
                format!("expected MovieID::Title::Genres, got {} fields", fields.len()),
            ));
        }
        let id = fields[0].trim().to_string();
        let (title, year) = split_title_year(fields[1]);
        let mut metadata = BTreeMap::new();
        if let Some(year) = year {
            metadata.insert("year".to_string(), year);
        }
        let genres: Vec<&str> = fields[2].split('|').map(str::trim).filter(|g| !g.is_empty()).collect();
        if !genres.is_empty() {
            metadata.insert("genre".to_string(), genres.join(", "));
        }
        catalog.insert(
            id.clone(),
            ItemRecord {
                item_id: id,
                title,
                metadata,
                reviews: Vec::new(),
                description: None,
            },
        );
    }
    Ok(catalog)
}

fn merge_plots(path: &Path, catalog: &mut BTreeMap<ItemId, ItemRecord>) -> Result<(), CorpusError> {
    for (idx, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PlotRecord = serde_json::from_str(line)
            .map_err(|e| CorpusError::malformed(path, idx + 1, e.to_string()))?;
        let id = id_string(&rec.item_id)
            .ok_or_else(|| CorpusError::malformed(path, idx + 1, "item_id must be a string or number"))?;
        match catalog.get_mut(&id) {
            Some(item) => {
                item.metadata.insert("plot".to_string(), rec.plot);
            }
            None => log::warn!("plot for unknown movie {id} ignored"),
        }
    }
    Ok(())
}

pub fn parse_movie_dataset(
    ratings_file: &Path,
    movies_file: &Path,
    plots_file: Option<&Path>,
    threshold: u8,
) -> Result<Ingested, CorpusError> {
    if !(1..=5).contains(&threshold) {
        return Err(CorpusError::ThresholdOutOfRange(threshold as i64));
    }
    let mut catalog = parse_movies(movies_file)?;
    if let Some(plots) = plots_file {
        merge_plots(plots, &mut catalog)?;
    }

    let mut report = IngestReport::default();
    let mut interactions = Vec::new();
    for (idx, line) in read_lines(ratings_file)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let lineno = idx + 1;
        let fields: Vec<&str> = line.trim().split("::").collect();
        if fields.len() != 4 {
            return Err(CorpusError::malformed(
                ratings_file,
                lineno,
                format!("expected UserID::MovieID::Rating::Timestamp, got {} fields", fields.len()),
            ));
        }
        let rating: i64 = fields[2]
            .parse()
            .map_err(|_| CorpusError::malformed(ratings_file, lineno, format!("bad rating {:?}", fields[2])))?;
        let raw_rating =
            Rating::new(rating).map_err(|e| CorpusError::malformed(ratings_file, lineno, e.to_string()))?;
        let timestamp: i64 = fields[3]
            .parse()
            .ok()
            .filter(|t: &i64| *t >= 0)
            .ok_or_else(|| CorpusError::malformed(ratings_file, lineno, format!("bad timestamp {:?}", fields[3])))?;
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(CorpusError::malformed(ratings_file, lineno, "empty user or movie id"));
        }
        interactions.push(Interaction {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            raw_rating,
            label: binarize(raw_rating, threshold)?,
            timestamp,
            review_text: None,
        });
    }

    let corpus = assemble(DatasetKind::Movies, threshold, interactions, catalog, &mut report);
    corpus.validate()?;
    Ok(Ingested { corpus, report })
}
