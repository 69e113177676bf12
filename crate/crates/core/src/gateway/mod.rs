//! LLM access: per-task decoding parameters, a persistent response cache,
//! bounded retries with jittered exponential backoff, request de-duplication
//! and a bounded number of in-flight requests.

mod cache;
mod http;
mod mock;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::ResponseCache;
pub use http::HttpBackend;
pub use mock::{mock_complete, mock_embed, MockBackend};

use crate::prompting::PromptBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    pub want_logprobs: bool,
}

impl DecodingParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ItemDescription,
    UserProfile,
    ReasoningGt,
    ZeroShotPredict,
    FinetunedPredict,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ItemDescription => "item_description",
            TaskKind::UserProfile => "user_profile",
            TaskKind::ReasoningGt => "reasoning_gt",
            TaskKind::ZeroShotPredict => "zero_shot_predict",
            TaskKind::FinetunedPredict => "finetuned_predict",
        }
    }

    pub fn is_prediction(self) -> bool {
        matches!(self, TaskKind::ZeroShotPredict | TaskKind::FinetunedPredict)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Generation settings per task. The first four rows are the reference
/// generation settings; the fine-tuned row is a local default.
pub fn default_params(task: TaskKind) -> DecodingParams {
    let (temperature, top_p, max_new_tokens) = match task {
        TaskKind::UserProfile => (0.01, 0.9, 256),
        TaskKind::ItemDescription => (0.01, 0.9, 64),
        TaskKind::ReasoningGt => (0.01, 0.75, 256),
        TaskKind::ZeroShotPredict => (0.01, 0.9, 300),
        TaskKind::FinetunedPredict => (0.01, 0.9, 256),
    };
    DecodingParams {
        temperature,
        top_p,
        max_new_tokens,
        want_logprobs: task.is_prediction(),
    }
}

/// Alternatives at one generated position: token -> log-probability.
pub type TokenAlternatives = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub first_token_logprobs: Option<Vec<TokenAlternatives>>,
    pub model_id: String,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddings {
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

pub struct ChatRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub params: &'a DecodingParams,
}

#[derive(Debug, Clone)]
pub struct BackendReply {
    pub text: String,
    pub logprobs: Option<Vec<TokenAlternatives>>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    /// Timeouts, connection failures, 429 and 5xx.
    #[error("transient failure{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transient { status: Option<u16>, message: String },
    #[error("request rejected (HTTP {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("{0}")]
    Unsupported(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

/// A chat-completion / token-embedding service.
pub trait Backend: Send + Sync {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<BackendReply, BackendError>;
    fn embed(&self, model: &str, text: &str) -> Result<TokenEmbeddings, BackendError>;
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("request rejected (HTTP {status}): {message}")]
    Request { status: u16, message: String },
    #[error("capability missing: {0}")]
    Capability(String),
    #[error("bad backend response: {0}")]
    Protocol(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: usize,
    pub base: Duration,
    pub cap: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            base: Duration::from_millis(500),
            cap: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt + 1`: the capped exponential step,
    /// scaled by a uniform jitter factor in [0.5, 1].
    pub fn delay(&self, attempt: usize) -> Duration {
        let exp = self.base.saturating_mul(1u32 << attempt.min(20));
        let step = exp.min(self.cap);
        step.mul_f64(rand::rng().random_range(0.5..=1.0))
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

type FlightResult = Option<Result<LlmResponse, GatewayError>>;

#[derive(Default)]
struct Flight {
    result: Mutex<FlightResult>,
    cv: Condvar,
}

pub struct GatewayBuilder {
    backend: Arc<dyn Backend>,
    embedder: Option<Arc<dyn Backend>>,
    model_id: String,
    embed_model: String,
    cache_dir: Option<std::path::PathBuf>,
    retry: RetryPolicy,
    concurrency: usize,
}

impl GatewayBuilder {
    pub fn embedder(mut self, backend: Arc<dyn Backend>, model: impl Into<String>) -> Self {
        self.embedder = Some(backend);
        self.embed_model = model.into();
        self
    }

    pub fn cache_dir(mut self, dir: impl Into<std::path::PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn concurrency(mut self, n: usize) -> Self {
        self.concurrency = n;
        self
    }

    pub fn build(self) -> Gateway {
        let embedder = self.embedder.unwrap_or_else(|| self.backend.clone());
        Gateway {
            backend: self.backend,
            embedder,
            model_id: self.model_id,
            embed_model: self.embed_model,
            cache: self.cache_dir.map(ResponseCache::new),
            retry: self.retry,
            permits: Semaphore::new(self.concurrency),
            concurrency: self.concurrency.max(1),
            inflight: Mutex::new(HashMap::new()),
            backend_calls: AtomicUsize::new(0),
        }
    }
}

/// Shared entry point for every LLM call in the pipeline.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    embedder: Arc<dyn Backend>,
    model_id: String,
    embed_model: String,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    permits: Semaphore,
    concurrency: usize,
    inflight: Mutex<HashMap<String, Arc<Flight>>>,
    backend_calls: AtomicUsize,
}

impl Gateway {
    pub fn builder(backend: Arc<dyn Backend>, model_id: impl Into<String>) -> GatewayBuilder {
        GatewayBuilder {
            backend,
            embedder: None,
            model_id: model_id.into(),
            embed_model: "mock-embedder".into(),
            cache_dir: None,
            retry: RetryPolicy::default(),
            concurrency: 4,
        }
    }

    /// Offline gateway backed by the deterministic mock.
    pub fn mock(cache_dir: Option<&std::path::Path>) -> Gateway {
        let mut b = Gateway::builder(Arc::new(MockBackend::default()), "mock");
        if let Some(dir) = cache_dir {
            b = b.cache_dir(dir);
        }
        b.build()
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    /// Network (or mock) requests issued so far, retries included.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn is_cached(&self, cache_key: &str) -> bool {
        self.cache.as_ref().is_some_and(|c| c.has_completion(cache_key))
    }

    pub fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, GatewayError> {
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get_completion(&bundle.cache_key)) {
            return Ok(hit);
        }

        let (flight, leader) = {
            let mut map = self.inflight.lock().unwrap();
            match map.get(&bundle.cache_key) {
                Some(f) => (f.clone(), false),
                None => {
                    let f = Arc::new(Flight::default());
                    map.insert(bundle.cache_key.clone(), f.clone());
                    (f, true)
                }
            }
        };

        if !leader {
            let mut slot = flight.result.lock().unwrap();
            while slot.is_none() {
                slot = flight.cv.wait(slot).unwrap();
            }
            return slot.clone().expect("flight result").map(|mut r| {
                r.cached = true;
                r
            });
        }

        let result = self.fetch_completion(bundle);
        *flight.result.lock().unwrap() = Some(result.clone());
        flight.cv.notify_all();
        self.inflight.lock().unwrap().remove(&bundle.cache_key);
        result
    }

    fn fetch_completion(&self, bundle: &PromptBundle) -> Result<LlmResponse, GatewayError> {
        // a concurrent leader may have finished between our cache probe and taking the flight
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get_completion(&bundle.cache_key)) {
            return Ok(hit);
        }
        let request = ChatRequest {
            model: &bundle.model_id,
            prompt: &bundle.rendered,
            params: &bundle.decoding,
        };
        let reply = self.with_retries(|| self.backend.chat(&request))?;
        let response = LlmResponse {
            text: reply.text,
            first_token_logprobs: reply.logprobs,
            model_id: bundle.model_id.clone(),
            cached: false,
        };
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put_completion(bundle, &response) {
                log::warn!("cache write for {} failed: {e}", bundle.cache_key);
            }
        }
        Ok(response)
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, GatewayError> {
        let _permit = self.permits.acquire();
        let mut attempt = 0;
        loop {
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match call() {
                Ok(v) => return Ok(v),
                Err(BackendError::Transient { message, .. }) => {
                    if attempt >= self.retry.max_retries {
                        return Err(GatewayError::Transport {
                            attempts: attempt + 1,
                            message,
                        });
                    }
                    let delay = self.retry.delay(attempt);
                    log::warn!("transient backend failure ({message}); retry {} in {delay:?}", attempt + 1);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(BackendError::Rejected { status, message }) => {
                    return Err(GatewayError::Request { status, message })
                }
                Err(BackendError::Unsupported(m)) => return Err(GatewayError::Capability(m)),
                Err(BackendError::Protocol(m)) => return Err(GatewayError::Protocol(m)),
            }
        }
    }

    pub fn embedding_key(&self, text: &str) -> String {
        let digest = Sha256::new()
            .chain_update(b"token-embeddings\0")
            .chain_update(self.embed_model.as_bytes())
            .chain_update(b"\0")
            .chain_update(text.as_bytes())
            .finalize();
        hex::encode(digest)
    }

    /// Token-level embeddings of `text`, every vector L2-normalized.
    pub fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddings, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidInput("cannot embed empty text".into()));
        }
        let key = self.embedding_key(text);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get_embedding(&key)) {
            return Ok(hit);
        }
        let raw = self.with_retries(|| self.embedder.embed(&self.embed_model, text))?;
        let out = normalize_embeddings(raw)?;
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put_embedding(&key, &self.embed_model, &out) {
                log::warn!("cache write for embedding {key} failed: {e}");
            }
        }
        Ok(out)
    }
}

fn normalize_embeddings(raw: TokenEmbeddings) -> Result<TokenEmbeddings, GatewayError> {
    if raw.tokens.len() != raw.vectors.len() || raw.tokens.is_empty() {
        return Err(GatewayError::Protocol(format!(
            "{} tokens but {} vectors",
            raw.tokens.len(),
            raw.vectors.len()
        )));
    }
    let dim = raw.vectors[0].len();
    let mut vectors = Vec::with_capacity(raw.vectors.len());
    for v in raw.vectors {
        if v.len() != dim || dim == 0 {
            return Err(GatewayError::Protocol("token vectors differ in dimension".into()));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(GatewayError::Protocol("zero or non-finite token vector".into()));
        }
        vectors.push(v.into_iter().map(|x| x / norm).collect());
    }
    Ok(TokenEmbeddings {
        tokens: raw.tokens,
        vectors,
    })
}

/// Order-preserving map over `items` on up to `workers` threads.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(f(&items[i]));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot filled"))
        .collect()
}
