//! Deterministic offline backend. Completions and token vectors are pure
//! functions of a SHA-256 digest of their input.

use std::time::Duration;

use sha2::{Digest, Sha256};

use super::{Backend, BackendError, BackendReply, ChatRequest, TokenAlternatives, TokenEmbeddings};

const MOCK_DIM: usize = 16;

const TRAITS: [&str; 16] = [
    "lightweight", "durable", "colorful", "affordable", "elegant", "comfortable", "dark", "witty",
    "classic", "bold", "gentle", "sturdy", "glossy", "slow-paced", "fragrant", "minimal",
];

#[derive(Debug, Default)]
pub struct MockBackend {
    latency: Option<Duration>,
}

impl MockBackend {
    pub fn with_latency(latency: Duration) -> Self {
        MockBackend { latency: Some(latency) }
    }
}

/// Text and first-token alternatives the mock produces for `prompt`.
///
/// The label is the parity of the digest's last byte; the Yes/No probabilities
/// put the predicted answer strictly above one half.
pub fn mock_complete(prompt: &str) -> (String, Vec<TokenAlternatives>) {
    let d = Sha256::digest(prompt.as_bytes());
    let yes = d[31] % 2 == 0;
    let dominant = 0.5 + 0.45 * (d[1] as f64 + 1.0) / 256.0;
    let p_yes = if yes { dominant } else { 1.0 - dominant };
    let word = |i: usize| TRAITS[(d[i] % TRAITS.len() as u8) as usize];
    let text = format!(
        "Prediction: {}\nThe user has shown a preference for {} and {} items. They dislike items that feel {}. \
         The target item is {} and {}, so the user is {} to enjoy it.",
        if yes { "Yes" } else { "No" },
        word(2),
        word(3),
        word(4),
        word(5),
        word(6),
        if yes { "likely" } else { "unlikely" },
    );
    let logprobs = vec![
        TokenAlternatives::from([("Prediction".to_string(), 0.0)]),
        TokenAlternatives::from([(":".to_string(), 0.0)]),
        TokenAlternatives::from([(" Yes".to_string(), p_yes.ln()), (" No".to_string(), (1.0 - p_yes).ln())]),
    ];
    (text, logprobs)
}

/// Whitespace tokens (lowercased, edge punctuation stripped) with one
/// digest-derived vector each. Vectors are not normalized here.
pub fn mock_embed(text: &str) -> TokenEmbeddings {
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    let vectors = tokens
        .iter()
        .map(|t| {
            let d = Sha256::digest(t.as_bytes());
            (0..MOCK_DIM)
                .map(|i| u16::from_le_bytes([d[2 * i], d[2 * i + 1]]) as f64 / 32767.5 - 1.0)
                .collect()
        })
        .collect();
    TokenEmbeddings { tokens, vectors }
}

impl Backend for MockBackend {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<BackendReply, BackendError> {
        if let Some(l) = self.latency {
            std::thread::sleep(l);
        }
        let (text, logprobs) = mock_complete(request.prompt);
        Ok(BackendReply {
            text,
            logprobs: request.params.want_logprobs.then_some(logprobs),
        })
    }

    fn embed(&self, _model: &str, text: &str) -> Result<TokenEmbeddings, BackendError> {
        let out = mock_embed(text);
        if out.tokens.is_empty() {
            return Err(BackendError::Rejected {
                status: 400,
                message: "no tokens in input".into(),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{parse_prediction, ParseStatus};

    #[test]
    fn deterministic_and_parseable() {
        let (a, la) = mock_complete("fixed prompt P");
        let (b, lb) = mock_complete("fixed prompt P");
        assert_eq!(a, b);
        assert_eq!(la, lb);
        for i in 0..50 {
            let (text, _) = mock_complete(&format!("prompt {i}"));
            assert_eq!(parse_prediction(&text).status, ParseStatus::Ok);
        }
    }

    #[test]
    fn one_byte_changes_yield_both_labels() {
        let labels: std::collections::BTreeSet<bool> =
            (0..32).map(|i| mock_complete(&format!("p{i}")).0.starts_with("Prediction: Yes")).collect();
        assert_eq!(labels.len(), 2);
    }

    #[test]
    fn mock_tokens_are_normalized_words() {
        let e = mock_embed("Hello, world! hello");
        assert_eq!(e.tokens, ["hello", "world", "hello"]);
        assert_eq!(e.vectors[0], e.vectors[2]);
        assert_eq!(e.vectors[0].len(), MOCK_DIM);
    }
}
