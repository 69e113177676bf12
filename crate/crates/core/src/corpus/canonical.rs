//! Canonical corpus file: one JSON record per line, tagged by `kind`.
//!
//! A single `corpus` header line is followed by every `item`, then every
//! `user`, then each user's `interaction` lines in chronological order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, DatasetKind, Interaction, ItemRecord, UserId, UserRecord};

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Corpus {
        dataset_kind: DatasetKind,
        k_core: usize,
        threshold: u8,
    },
    Item(ItemRecord),
    User {
        user_id: UserId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        profile: Option<String>,
    },
    Interaction(Interaction),
}

pub fn write_canonical(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut emit = |line: &Line| -> std::io::Result<()> {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n")
    };
    let res = (|| {
        emit(&Line::Corpus {
            dataset_kind: corpus.dataset_kind,
            k_core: corpus.k_core,
            threshold: corpus.threshold,
        })?;
        for item in corpus.items.values() {
            emit(&Line::Item(item.clone()))?;
        }
        for user in corpus.users.values() {
            emit(&Line::User {
                user_id: user.user_id.clone(),
                profile: user.profile.clone(),
            })?;
        }
        for user in corpus.users.values() {
            for it in &user.interactions {
                emit(&Line::Interaction(it.clone()))?;
            }
        }
        Ok(())
    })();
    res.and_then(|_| out.flush()).map_err(|e| CorpusError::io(path, e))
}

pub fn read_canonical(path: &Path) -> Result<Corpus, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut header = None;
    let mut items = BTreeMap::new();
    let mut users: BTreeMap<UserId, UserRecord> = BTreeMap::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line =
            serde_json::from_str(&line).map_err(|e| CorpusError::malformed(path, idx + 1, e.to_string()))?;
        match parsed {
            Line::Corpus {
                dataset_kind,
                k_core,
                threshold,
            } => {
                if header.replace((dataset_kind, k_core, threshold)).is_some() {
                    return Err(CorpusError::malformed(path, idx + 1, "second corpus header"));
                }
            }
            Line::Item(item) => {
                if items.insert(item.item_id.clone(), item).is_some() {
                    return Err(CorpusError::malformed(path, idx + 1, "duplicate item id"));
                }
            }
            Line::User { user_id, profile } => {
                let record = UserRecord {
                    user_id: user_id.clone(),
                    interactions: Vec::new(),
                    profile,
                };
                if users.insert(user_id, record).is_some() {
                    return Err(CorpusError::malformed(path, idx + 1, "duplicate user id"));
                }
            }
            Line::Interaction(it) => match users.get_mut(&it.user_id) {
                Some(u) => u.interactions.push(it),
                None => {
                    return Err(CorpusError::malformed(
                        path,
                        idx + 1,
                        format!("interaction for undeclared user {}", it.user_id),
                    ))
                }
            },
        }
    }

    let (dataset_kind, k_core, threshold) =
        header.ok_or_else(|| CorpusError::malformed(path, 1, "missing corpus header line"))?;
    let corpus = Corpus {
        users,
        items,
        dataset_kind,
        k_core,
        threshold,
    };
    corpus.validate()?;
    Ok(corpus)
}
