//! On-disk response cache: `{dir}/{key[..2]}/{key}.json` plus an append-only
//! `index.jsonl`. Entries are written to a temporary file and renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DecodingParams, LlmResponse, TokenAlternatives, TokenEmbeddings};
use crate::prompting::PromptBundle;

#[derive(Serialize, Deserialize)]
struct CompletionEntry {
    key: String,
    kind: String,
    request_digest: String,
    model: String,
    params: DecodingParams,
    text: String,
    logprobs: Option<Vec<TokenAlternatives>>,
    timestamp: u64,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingEntry {
    key: String,
    kind: String,
    model: String,
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
    timestamp: u64,
}

pub struct ResponseCache {
    dir: PathBuf,
    index: Mutex<()>,
    tmp_counter: AtomicU64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl ResponseCache {
    /// Nothing is created on disk until the first write.
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache {
            dir: dir.into(),
            index: Mutex::new(()),
            tmp_counter: AtomicU64::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("xx");
        self.dir.join(shard).join(format!("{key}.json"))
    }

    pub fn has_completion(&self, key: &str) -> bool {
        self.entry_path(key).is_file()
    }

    pub fn get_completion(&self, key: &str) -> Option<LlmResponse> {
        let raw = std::fs::read(self.entry_path(key)).ok()?;
        match serde_json::from_slice::<CompletionEntry>(&raw) {
            Ok(e) if e.key == key => Some(LlmResponse {
                text: e.text,
                first_token_logprobs: e.logprobs,
                model_id: e.model,
                cached: true,
            }),
            Ok(_) => None,
            Err(err) => {
                log::warn!("unreadable cache entry {key}: {err}");
                None
            }
        }
    }

    pub fn get_embedding(&self, key: &str) -> Option<TokenEmbeddings> {
        let raw = std::fs::read(self.entry_path(key)).ok()?;
        let e: EmbeddingEntry = serde_json::from_slice(&raw).ok()?;
        (e.key == key).then_some(TokenEmbeddings {
            tokens: e.tokens,
            vectors: e.vectors,
        })
    }

    pub fn put_completion(&self, bundle: &PromptBundle, resp: &LlmResponse) -> std::io::Result<()> {
        let entry = CompletionEntry {
            key: bundle.cache_key.clone(),
            kind: "completion".into(),
            request_digest: hex::encode(Sha256::digest(bundle.rendered.as_bytes())),
            model: bundle.model_id.clone(),
            params: bundle.decoding,
            text: resp.text.clone(),
            logprobs: resp.first_token_logprobs.clone(),
            timestamp: now(),
        };
        self.write_entry(&entry.key, "completion", &serde_json::to_vec_pretty(&entry)?)
    }

    pub fn put_embedding(&self, key: &str, model: &str, emb: &TokenEmbeddings) -> std::io::Result<()> {
        let entry = EmbeddingEntry {
            key: key.to_string(),
            kind: "embedding".into(),
            model: model.to_string(),
            tokens: emb.tokens.clone(),
            vectors: emb.vectors.clone(),
            timestamp: now(),
        };
        self.write_entry(key, "embedding", &serde_json::to_vec(&entry)?)
    }

    fn write_entry(&self, key: &str, kind: &str, body: &[u8]) -> std::io::Result<()> {
        let path = self.entry_path(key);
        let parent = path.parent().expect("sharded path has a parent");
        std::fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::SeqCst)
        ));
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, &path)?;

        let _guard = self.index.lock().unwrap();
        let mut index = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("index.jsonl"))?;
        let line = serde_json::json!({
            "key": key,
            "kind": kind,
            "path": path.strip_prefix(&self.dir).unwrap_or(&path).to_string_lossy(),
        });
        writeln!(index, "{line}")
    }
}
