//! Content-addressed artifact store.
//!
//! Layout under the store root:
//! `{kind}/{digest[..2]}/{digest}.txt` holds artifact text (digest = SHA-256 of
//! the text) and `{kind}/index.jsonl` maps (subject, template) to a text file.
//! The index is rewritten sorted on `flush`, so identical contents always give
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fsutil::write_atomic;
use crate::prompting::TemplateId;
use crate::splitter::Split;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Description,
    Profile,
    ReasoningGt,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 3] = [ArtifactKind::Description, ArtifactKind::Profile, ArtifactKind::ReasoningGt];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Description => "description",
            ArtifactKind::Profile => "profile",
            ArtifactKind::ReasoningGt => "reasoning_gt",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An item id, a user id, or a (user id, split) pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Subject {
    pub fn item(id: &str) -> Self {
        Subject { id: id.into(), split: None }
    }

    pub fn user(id: &str) -> Self {
        Subject { id: id.into(), split: None }
    }

    pub fn example(user_id: &str, split: Split) -> Self {
        Subject {
            id: user_id.into(),
            split: Some(split),
        }
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.split {
            Some(s) => write!(f, "{}@{s}", self.id),
            None => f.write_str(&self.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationArtifact {
    pub kind: ArtifactKind,
    pub subject: Subject,
    pub text: String,
    pub model_id: String,
    pub template: TemplateId,
    pub cache_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub kind: ArtifactKind,
    pub subject: Subject,
    pub template: TemplateId,
    pub cache_key: String,
    /// Relative to the store root.
    pub path: String,
    pub model_id: String,
}

type Key = (ArtifactKind, TemplateId, Subject);

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Index { path: PathBuf, line: usize, message: String },
    #[error("refusing to store empty text for {0}")]
    EmptyText(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub struct ArtifactStore {
    root: PathBuf,
    entries: Mutex<BTreeMap<Key, IndexEntry>>,
}

impl ArtifactStore {
    /// Opens `root`, loading any existing indexes. Missing directories are fine.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let mut entries = BTreeMap::new();
        for kind in ArtifactKind::ALL {
            let path = root.join(kind.as_str()).join("index.jsonl");
            let file = match std::fs::File::open(&path) {
                Ok(f) => f,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(io_err(&path)(e)),
            };
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err(&path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: IndexEntry = serde_json::from_str(&line).map_err(|err| StoreError::Index {
                    path: path.clone(),
                    line: i + 1,
                    message: err.to_string(),
                })?;
                entries.insert((e.kind, e.template.clone(), e.subject.clone()), e);
            }
        }
        Ok(ArtifactStore {
            root,
            entries: Mutex::new(entries),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the text file (if new) and records the index entry in memory.
    pub fn put(&self, artifact: &GenerationArtifact) -> Result<(), StoreError> {
        if artifact.text.trim().is_empty() {
            return Err(StoreError::EmptyText(artifact.subject.to_string()));
        }
        let digest = hex::encode(Sha256::digest(artifact.text.as_bytes()));
        let rel = format!("{}/{}/{digest}.txt", artifact.kind.as_str(), &digest[..2]);
        let path = self.root.join(&rel);
        if !path.is_file() {
            write_atomic(&path, artifact.text.as_bytes()).map_err(io_err(&path))?;
        }
        let entry = IndexEntry {
            kind: artifact.kind,
            subject: artifact.subject.clone(),
            template: artifact.template.clone(),
            cache_key: artifact.cache_key.clone(),
            path: rel,
            model_id: artifact.model_id.clone(),
        };
        self.entries
            .lock()
            .unwrap()
            .insert((artifact.kind, artifact.template.clone(), artifact.subject.clone()), entry);
        Ok(())
    }

    /// Rewrites every index file in sorted order.
    pub fn flush(&self) -> Result<(), StoreError> {
        let entries = self.entries.lock().unwrap();
        for kind in ArtifactKind::ALL {
            let lines: Vec<String> = entries
                .values()
                .filter(|e| e.kind == kind)
                .map(|e| serde_json::to_string(e).expect("index entry serializes"))
                .collect();
            if lines.is_empty() {
                continue;
            }
            let path = self.root.join(kind.as_str()).join("index.jsonl");
            let mut body = lines.join("\n");
            body.push('\n');
            write_atomic(&path, body.as_bytes()).map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn entries(&self, kind: ArtifactKind, template: &TemplateId) -> Vec<IndexEntry> {
        self.entries
            .lock()
            .unwrap()
            .values()
            .filter(|e| e.kind == kind && &e.template == template)
            .cloned()
            .collect()
    }

    pub fn read_text(&self, entry: &IndexEntry) -> Result<String, StoreError> {
        let path = self.root.join(&entry.path);
        std::fs::read_to_string(&path).map_err(io_err(&path))
    }

    pub fn get(&self, kind: ArtifactKind, template: &TemplateId, subject: &Subject) -> Result<Option<GenerationArtifact>, StoreError> {
        let entry = self
            .entries
            .lock()
            .unwrap()
            .get(&(kind, template.clone(), subject.clone()))
            .cloned();
        entry
            .map(|e| {
                Ok(GenerationArtifact {
                    text: self.read_text(&e)?,
                    kind: e.kind,
                    subject: e.subject,
                    model_id: e.model_id,
                    template: e.template,
                    cache_key: e.cache_key,
                })
            })
            .transpose()
    }

    /// Every text of `kind` produced with `template`, by subject.
    pub fn texts(&self, kind: ArtifactKind, template: &TemplateId) -> Result<BTreeMap<Subject, String>, StoreError> {
        self.entries(kind, template)
            .into_iter()
            .map(|e| Ok((e.subject.clone(), self.read_text(&e)?)))
            .collect()
    }
}
