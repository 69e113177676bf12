//! Leave-one-out targets: the last three interactions of every user become the
//! test, validation and training targets, each with its recent-k history.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Interaction, ItemId, Label, UserId, UserRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    /// Offset of the target from the end of the user sequence.
    fn offset_from_end(self) -> usize {
        match self {
            Split::Test => 1,
            Split::Valid => 2,
            Split::Train => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitExample {
    pub user_id: UserId,
    pub split: Split,
    /// Index of the target in the user's chronological sequence.
    pub position: usize,
    pub target: Interaction,
    /// Up to k interactions immediately preceding the target, oldest first.
    pub history: Vec<Interaction>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub users: usize,
    pub skipped_users: usize,
    pub examples: usize,
}

fn examples_for_user(user: &UserRecord, k: usize) -> Option<[SplitExample; 3]> {
    let n = user.interactions.len();
    if n < 3 {
        return None;
    }
    Some(Split::ALL.map(|split| {
        let position = n - split.offset_from_end();
        let start = position.saturating_sub(k);
        SplitExample {
            user_id: user.user_id.clone(),
            split,
            position,
            target: user.interactions[position].clone(),
            history: user.interactions[start..position].to_vec(),
        }
    }))
}

/// Emits train, valid and test examples for every user with at least three
/// interactions, in user order. Shorter users are skipped and counted.
pub fn split_corpus(corpus: &Corpus, k: usize) -> (Vec<SplitExample>, SplitReport) {
    let mut report = SplitReport::default();
    let mut out = Vec::with_capacity(corpus.users.len() * 3);
    for user in corpus.users.values() {
        match examples_for_user(user, k) {
            Some(examples) => {
                report.users += 1;
                out.extend(examples);
            }
            None => {
                log::warn!(
                    "user {} has {} interactions (< 3), skipped by splitter",
                    user.user_id,
                    user.interactions.len()
                );
                report.skipped_users += 1;
            }
        }
    }
    report.examples = out.len();
    (out, report)
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Malformed { path: PathBuf, line: usize, message: String },
}

/// One line of the persisted split manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub user_id: UserId,
    pub split: Split,
    pub target_item: ItemId,
    pub target_label: Label,
    pub history_items: Vec<ItemId>,
    pub history_labels: Vec<Label>,
    pub target_position: usize,
}

impl From<&SplitExample> for ManifestEntry {
    fn from(ex: &SplitExample) -> Self {
        ManifestEntry {
            user_id: ex.user_id.clone(),
            split: ex.split,
            target_item: ex.target.item_id.clone(),
            target_label: ex.target.label,
            history_items: ex.history.iter().map(|i| i.item_id.clone()).collect(),
            history_labels: ex.history.iter().map(|i| i.label).collect(),
            target_position: ex.position,
        }
    }
}

impl ManifestEntry {
    /// Rebuilds the full example from the corpus it was split from.
    pub fn resolve(&self, corpus: &Corpus) -> Option<SplitExample> {
        let user = corpus.users.get(&self.user_id)?;
        let target = user.interactions.get(self.target_position)?;
        if target.item_id != self.target_item || target.label != self.target_label {
            return None;
        }
        let start = self.target_position.checked_sub(self.history_items.len())?;
        let history = user.interactions[start..self.target_position].to_vec();
        let matches = history
            .iter()
            .zip(&self.history_items)
            .zip(&self.history_labels)
            .all(|((h, id), label)| &h.item_id == id && h.label == *label);
        if !matches || self.history_labels.len() != history.len() {
            return None;
        }
        Some(SplitExample {
            user_id: self.user_id.clone(),
            split: self.split,
            position: self.target_position,
            target: target.clone(),
            history,
        })
    }
}

pub fn write_manifest(examples: &[SplitExample], path: &Path) -> Result<(), ManifestError> {
    let io = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for ex in examples {
        serde_json::to_writer(&mut out, &ManifestEntry::from(ex)).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    let io = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ManifestError::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Resolves a manifest against its corpus, failing on the first stale entry.
pub fn load_examples(path: &Path, corpus: &Corpus) -> Result<Vec<SplitExample>, ManifestError> {
    read_manifest(path)?
        .iter()
        .enumerate()
        .map(|(idx, entry)| {
            entry.resolve(corpus).ok_or_else(|| ManifestError::Malformed {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("entry ({}, {}) does not match the corpus", entry.user_id, entry.split),
            })
        })
        .collect()
}
