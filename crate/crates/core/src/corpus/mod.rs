//! Canonical interaction corpus: users, items and their chronological
//! interactions, plus the rating binarization and user-level k-core filter.

mod canonical;
mod movies;
mod products;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use canonical::{read_canonical, write_canonical};
pub use movies::parse_movie_dataset;
pub use products::parse_product_dataset;

pub type UserId = String;
pub type ItemId = String;

/// Default binarization threshold: ratings strictly above it are likes.
pub const DEFAULT_THRESHOLD: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("rating {0} outside the 1..=5 star range")]
    RatingOutOfRange(i64),
    #[error("threshold {0} outside the 1..=5 star range")]
    ThresholdOutOfRange(i64),
    #[error("{}:{line}: {message}", path.display())]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus invariant violated: {0}")]
    Invariant(String),
}

impl CorpusError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        CorpusError::Malformed {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

/// Star rating in `1..=5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Rating(u8);

impl Rating {
    pub fn new(value: i64) -> Result<Self, CorpusError> {
        if (1..=5).contains(&value) {
            Ok(Rating(value as u8))
        } else {
            Err(CorpusError::RatingOutOfRange(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl<'de> Deserialize<'de> for Rating {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(de)?;
        Rating::new(v).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Binary preference label, serialized as `0` / `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Dislike,
    Like,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Label> {
        match bit {
            0 => Some(Label::Dislike),
            1 => Some(Label::Like),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Dislike => 0,
            Label::Like => 1,
        }
    }

    pub fn is_like(self) -> bool {
        self == Label::Like
    }

    /// "Yes" / "No", as used on the prediction line.
    pub fn answer(self) -> &'static str {
        match self {
            Label::Like => "Yes",
            Label::Dislike => "No",
        }
    }

    /// "like" / "dislike".
    pub fn verb(self) -> &'static str {
        match self {
            Label::Like => "like",
            Label::Dislike => "dislike",
        }
    }

    /// "Liked" / "Disliked", the history-line prefix.
    pub fn past_tense(self) -> &'static str {
        match self {
            Label::Like => "Liked",
            Label::Dislike => "Disliked",
        }
    }

    pub fn flip(self) -> Label {
        match self {
            Label::Like => Label::Dislike,
            Label::Dislike => Label::Like,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.bit())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(de)?;
        Label::from_bit(v).ok_or_else(|| serde::de::Error::custom(format!("label {v} is not 0 or 1")))
    }
}

/// `Like` iff `raw > threshold`.
pub fn binarize(raw: Rating, threshold: u8) -> Result<Label, CorpusError> {
    if !(1..=5).contains(&threshold) {
        return Err(CorpusError::ThresholdOutOfRange(threshold as i64));
    }
    Ok(if raw.value() > threshold {
        Label::Like
    } else {
        Label::Dislike
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Movies,
    Products,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Movies => "movies",
            DatasetKind::Products => "products",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "movies" => Ok(DatasetKind::Movies),
            "products" => Ok(DatasetKind::Products),
            other => Err(format!("unknown dataset kind {other:?} (expected movies|products)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub raw_rating: Rating,
    pub label: Label,
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub rating: Rating,
    pub text: String,
    pub user_id: UserId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: ItemId,
    pub title: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub reviews: Vec<Review>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl ItemRecord {
    pub fn bare(item_id: &str) -> Self {
        ItemRecord {
            item_id: item_id.to_string(),
            title: item_id.to_string(),
            metadata: BTreeMap::new(),
            reviews: Vec::new(),
            description: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: UserId,
    /// Chronological; ties keep input order.
    pub interactions: Vec<Interaction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub users: BTreeMap<UserId, UserRecord>,
    pub items: BTreeMap<ItemId, ItemRecord>,
    pub dataset_kind: DatasetKind,
    /// Minimum interactions per user guaranteed by the last k-core pass (1 = unfiltered).
    pub k_core: usize,
    pub threshold: u8,
}

impl Corpus {
    pub fn empty(dataset_kind: DatasetKind, threshold: u8) -> Self {
        Corpus {
            users: BTreeMap::new(),
            items: BTreeMap::new(),
            dataset_kind,
            k_core: 1,
            threshold,
        }
    }

    pub fn interaction_count(&self) -> usize {
        self.users.values().map(|u| u.interactions.len()).sum()
    }

    pub fn interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.users.values().flat_map(|u| u.interactions.iter())
    }

    /// Checks referential integrity and ordering. Parsers and readers call
    /// this before returning a corpus.
    pub fn validate(&self) -> Result<(), CorpusError> {
        for (id, user) in &self.users {
            if &user.user_id != id {
                return Err(CorpusError::Invariant(format!("user key {id} != {}", user.user_id)));
            }
            for w in user.interactions.windows(2) {
                if w[0].timestamp > w[1].timestamp {
                    return Err(CorpusError::Invariant(format!(
                        "user {id}: interactions out of timestamp order"
                    )));
                }
            }
            for it in &user.interactions {
                if &it.user_id != id {
                    return Err(CorpusError::Invariant(format!(
                        "interaction of {} filed under user {id}",
                        it.user_id
                    )));
                }
                if !self.items.contains_key(&it.item_id) {
                    return Err(CorpusError::Invariant(format!(
                        "interaction references unknown item {}",
                        it.item_id
                    )));
                }
                if it.timestamp < 0 {
                    return Err(CorpusError::Invariant(format!("negative timestamp for user {id}")));
                }
                if binarize(it.raw_rating, self.threshold)? != it.label {
                    return Err(CorpusError::Invariant(format!(
                        "label of ({id}, {}) disagrees with threshold {}",
                        it.item_id, self.threshold
                    )));
                }
            }
        }
        for (id, item) in &self.items {
            if &item.item_id != id {
                return Err(CorpusError::Invariant(format!("item key {id} != {}", item.item_id)));
            }
            for r in &item.reviews {
                if !self.users.contains_key(&r.user_id) {
                    return Err(CorpusError::Invariant(format!(
                        "review of item {id} by unknown user {}",
                        r.user_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Counters collected while ingesting a raw dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub lines: usize,
    pub interactions: usize,
    pub duplicates: usize,
    pub skipped_records: usize,
    pub truncated_ratings: usize,
    pub items_without_metadata: usize,
    pub missing_timestamps: usize,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub corpus: Corpus,
    pub report: IngestReport,
}

/// Builds a corpus from interactions in input order. Interactions are stably
/// sorted by timestamp per user, duplicates of (user, item, timestamp) keep the
/// first occurrence, and items without catalog entries get a bare record.
pub(crate) fn assemble(
    kind: DatasetKind,
    threshold: u8,
    interactions: Vec<Interaction>,
    mut catalog: BTreeMap<ItemId, ItemRecord>,
    report: &mut IngestReport,
) -> Corpus {
    let mut seen = BTreeSet::new();
    let mut users: BTreeMap<UserId, UserRecord> = BTreeMap::new();
    for it in interactions {
        if !seen.insert((it.user_id.clone(), it.item_id.clone(), it.timestamp)) {
            log::warn!(
                "duplicate interaction ({}, {}, {}) ignored",
                it.user_id,
                it.item_id,
                it.timestamp
            );
            report.duplicates += 1;
            continue;
        }
        users
            .entry(it.user_id.clone())
            .or_insert_with(|| UserRecord {
                user_id: it.user_id.clone(),
                interactions: Vec::new(),
                profile: None,
            })
            .interactions
            .push(it);
    }

    let mut items = BTreeMap::new();
    for user in users.values_mut() {
        // stable sort keeps file order among equal timestamps
        user.interactions.sort_by_key(|i| i.timestamp);
    }
    for user in users.values() {
        for it in &user.interactions {
            if !items.contains_key(&it.item_id) {
                let record = catalog.remove(&it.item_id).unwrap_or_else(|| {
                    report.items_without_metadata += 1;
                    ItemRecord::bare(&it.item_id)
                });
                items.insert(it.item_id.clone(), record);
            }
        }
    }
    // reviews follow the user-major chronological order so they are reproducible
    for user in users.values() {
        for it in &user.interactions {
            if let Some(text) = &it.review_text {
                if let Some(item) = items.get_mut(&it.item_id) {
                    item.reviews.push(Review {
                        rating: it.raw_rating,
                        text: text.clone(),
                        user_id: it.user_id.clone(),
                    });
                }
            }
        }
    }
    report.interactions = users.values().map(|u| u.interactions.len()).sum();

    Corpus {
        users,
        items,
        dataset_kind: kind,
        k_core: 1,
        threshold,
    }
}

/// Keeps exactly the users with at least `k` interactions. Items left without
/// any interaction are dropped, as are reviews written by removed users.
///
/// This is a single pass over users, not the iterated bipartite core.
pub fn apply_k_core(corpus: &Corpus, k: usize) -> Corpus {
    let k = k.max(1);
    let users: BTreeMap<UserId, UserRecord> = corpus
        .users
        .iter()
        .filter(|(_, u)| u.interactions.len() >= k)
        .map(|(id, u)| (id.clone(), u.clone()))
        .collect();
    let live_items: BTreeSet<&ItemId> = users
        .values()
        .flat_map(|u| u.interactions.iter().map(|i| &i.item_id))
        .collect();
    let items = corpus
        .items
        .iter()
        .filter(|(id, _)| live_items.contains(id))
        .map(|(id, item)| {
            let mut item = item.clone();
            item.reviews.retain(|r| users.contains_key(&r.user_id));
            (id.clone(), item)
        })
        .collect();
    Corpus {
        users,
        items,
        dataset_kind: corpus.dataset_kind,
        k_core: corpus.k_core.max(k),
        threshold: corpus.threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inter(user: &str, item: &str, rating: i64, ts: i64) -> Interaction {
        let raw = Rating::new(rating).unwrap();
        Interaction {
            user_id: user.into(),
            item_id: item.into(),
            raw_rating: raw,
            label: binarize(raw, 3).unwrap(),
            timestamp: ts,
            review_text: None,
        }
    }

    fn corpus_with_counts(counts: &[usize]) -> Corpus {
        let mut all = Vec::new();
        for (u, &n) in counts.iter().enumerate() {
            for j in 0..n {
                all.push(inter(&format!("u{u}"), &format!("i{u}_{j}"), 1 + (j % 5) as i64, j as i64));
            }
        }
        assemble(DatasetKind::Movies, 3, all, BTreeMap::new(), &mut IngestReport::default())
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(Rating::new(4).unwrap(), 3).unwrap(), Label::Like);
        assert_eq!(binarize(Rating::new(3).unwrap(), 3).unwrap(), Label::Dislike);
        assert_eq!(binarize(Rating::new(5).unwrap(), 3).unwrap(), Label::Like);
    }

    #[test]
    fn rating_range_is_enforced() {
        assert!(Rating::new(0).is_err());
        assert!(Rating::new(6).is_err());
        assert!(binarize(Rating::new(3).unwrap(), 0).is_err());
        assert!(serde_json::from_str::<Rating>("7").is_err());
    }

    #[test]
    fn k_core_drops_short_users() {
        let c = corpus_with_counts(&[4, 5]);
        let out = apply_k_core(&c, 5);
        assert_eq!(out.users.len(), 1);
        assert!(out.users.contains_key("u1"));
        assert_eq!(out.items.len(), 5);
        out.validate().unwrap();
    }

    #[test]
    fn k_core_one_is_identity() {
        let c = corpus_with_counts(&[1, 2, 3]);
        let out = apply_k_core(&c, 1);
        assert_eq!(out.users, c.users);
        assert_eq!(out.items, c.items);
    }

    #[test]
    fn k_core_counts_one_through_ten() {
        let counts: Vec<usize> = (1..=10).collect();
        let c = corpus_with_counts(&counts);
        // brute-force oracle: count users whose sequence length reaches 5
        let expected = counts.iter().filter(|&&n| n >= 5).count();
        assert_eq!(expected, 6);
        assert_eq!(apply_k_core(&c, 5).users.len(), expected);
    }

    #[test]
    fn k_core_removes_reviews_of_dropped_users() {
        let mut a = inter("a", "x", 5, 1);
        a.review_text = Some("great".into());
        let mut b = inter("b", "x", 2, 2);
        b.review_text = Some("meh".into());
        let b2 = inter("b", "y", 2, 3);
        let c = assemble(DatasetKind::Products, 3, vec![a, b, b2], BTreeMap::new(), &mut IngestReport::default());
        assert_eq!(c.items["x"].reviews.len(), 2);
        let out = apply_k_core(&c, 2);
        assert_eq!(out.items["x"].reviews.len(), 1);
        assert_eq!(out.items["x"].reviews[0].user_id, "b");
        out.validate().unwrap();
    }

    #[test]
    fn ties_keep_input_order() {
        let c = assemble(
            DatasetKind::Movies,
            3,
            vec![inter("u", "b", 4, 10), inter("u", "a", 4, 10), inter("u", "c", 4, 5)],
            BTreeMap::new(),
            &mut IngestReport::default(),
        );
        let order: Vec<_> = c.users["u"].interactions.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(order, ["c", "b", "a"]);
    }

    proptest! {
        #[test]
        fn binarize_is_monotone(a in 1i64..=5, b in 1i64..=5, t in 1u8..=5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let la = binarize(Rating::new(lo).unwrap(), t).unwrap();
            let lb = binarize(Rating::new(hi).unwrap(), t).unwrap();
            prop_assert!(la <= lb);
        }

        #[test]
        fn k_core_is_idempotent_and_sound(counts in proptest::collection::vec(0usize..12, 0..20), k in 1usize..10) {
            let c = corpus_with_counts(&counts);
            let once = apply_k_core(&c, k);
            let twice = apply_k_core(&once, k);
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.users.values().all(|u| u.interactions.len() >= k));
            let expected = counts.iter().filter(|&&n| n >= k).count();
            prop_assert_eq!(once.users.len(), expected);
            prop_assert!(once.validate().is_ok());
        }
    }
}
