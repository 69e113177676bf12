//! Chat-completions and token-embedding endpoints over HTTP.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendError, BackendReply, ChatRequest, TokenAlternatives, TokenEmbeddings};

/// Logprob positions kept from a response.
const LOGPROB_POSITIONS: usize = 16;

pub struct HttpBackend {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpBackend {
            agent,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.filter(|k| !k.is_empty()),
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<(u16, String), BackendError> {
        let url = format!("{}{path}", self.base_url);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| BackendError::Transient {
            status: None,
            message: format!("POST {url}: {e}"),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| BackendError::Transient {
            status: Some(status),
            message: format!("reading body of {url}: {e}"),
        })?;
        Ok((status, text))
    }
}

fn server_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/error/message")
                .or_else(|| v.get("error"))
                .and_then(Value::as_str)
                .map(str::to_string)
        })
        .unwrap_or_else(|| body.chars().take(500).collect())
}

fn classify(status: u16, body: &str) -> Result<(), BackendError> {
    match status {
        200..=299 => Ok(()),
        408 | 429 | 500..=599 => Err(BackendError::Transient {
            status: Some(status),
            message: server_message(body),
        }),
        _ => Err(BackendError::Rejected {
            status,
            message: server_message(body),
        }),
    }
}

pub fn chat_request_body(request: &ChatRequest<'_>) -> Value {
    json!({
        "model": request.model,
        "messages": [{"role": "user", "content": request.prompt}],
        "temperature": request.params.temperature,
        "top_p": request.params.top_p,
        "max_tokens": request.params.max_new_tokens,
        "logprobs": request.params.want_logprobs,
        "top_logprobs": 5,
    })
}

/// Reads `choices[0].message.content` and, when present, the per-position
/// alternatives from `choices[0].logprobs.content`.
pub fn parse_chat_response(body: &str) -> Result<BackendReply, BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::Protocol(e.to_string()))?;
    let choice = v
        .pointer("/choices/0")
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("choices[0].message.content missing".into()))?
        .to_string();
    let logprobs = choice.pointer("/logprobs/content").and_then(Value::as_array).map(|positions| {
        positions
            .iter()
            .take(LOGPROB_POSITIONS)
            .map(|pos| {
                let mut alts = TokenAlternatives::new();
                if let (Some(t), Some(lp)) = (pos.get("token").and_then(Value::as_str), pos.get("logprob").and_then(Value::as_f64)) {
                    alts.insert(t.to_string(), lp);
                }
                for alt in pos.get("top_logprobs").and_then(Value::as_array).into_iter().flatten() {
                    if let (Some(t), Some(lp)) = (alt.get("token").and_then(Value::as_str), alt.get("logprob").and_then(Value::as_f64)) {
                        alts.insert(t.to_string(), lp);
                    }
                }
                alts
            })
            .collect()
    });
    Ok(BackendReply { text, logprobs })
}

impl Backend for HttpBackend {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<BackendReply, BackendError> {
        let (status, body) = self.post("/v1/chat/completions", &chat_request_body(request))?;
        classify(status, &body)?;
        parse_chat_response(&body)
    }

    fn embed(&self, model: &str, text: &str) -> Result<TokenEmbeddings, BackendError> {
        let (status, body) = self.post("/v1/token-embeddings", &json!({"model": model, "input": text}))?;
        if matches!(status, 404 | 405 | 501) {
            return Err(BackendError::Unsupported(format!(
                "backend at {} has no token-level embedding endpoint (HTTP {status}); use the bundled mock embedder",
                self.base_url
            )));
        }
        classify(status, &body)?;
        serde_json::from_str(&body).map_err(|e| BackendError::Protocol(format!("token-embeddings: {e}")))
    }
}
