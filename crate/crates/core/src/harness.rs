//! Evaluation: render prediction prompts, query the gateway, parse labels,
//! derive ranking scores and attach similarity against reference reasoning.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::ArtifactView;
use crate::corpus::{ItemId, Label, UserId};
use crate::fsutil::write_atomic;
use crate::gateway::{parallel_map, Gateway, GatewayError, LlmResponse, TaskKind};
use crate::metrics::{greedy_match_score, SimilarityScore};
use crate::prompting::{PromptError, Prompter, TemplateId};
use crate::splitter::{Split, SplitExample};

/// Tokens searched for a bare Yes/No when no "Prediction:" anchor is found.
pub const FALLBACK_WINDOW: usize = 10;

static ANCHOR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bprediction\b[\s:*\-=–—]*\b(yes|no)\b").expect("anchor regex"));
static LEADING_ANCHOR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*\**\s*prediction\b[\s:*\-=–—]*\b(yes|no)\b[\s*.,]*").expect("leading anchor regex"));
static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\S+").expect("word regex"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Fallback,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrediction {
    pub label: Option<Label>,
    /// Text after the matched label: the generated reasoning.
    pub remainder: String,
    pub status: ParseStatus,
}

fn yes_no(word: &str) -> Option<Label> {
    match word.to_ascii_lowercase().as_str() {
        "yes" => Some(Label::Like),
        "no" => Some(Label::Dislike),
        _ => None,
    }
}

fn clean_remainder(rest: &str) -> String {
    rest.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '.' | ','))
        .trim_end()
        .to_string()
}

pub fn parse_prediction(text: &str) -> ParsedPrediction {
    if let Some(c) = ANCHOR.captures(text) {
        let whole = c.get(0).expect("match");
        return ParsedPrediction {
            label: yes_no(&c[1]),
            remainder: clean_remainder(&text[whole.end()..]),
            status: ParseStatus::Ok,
        };
    }
    for m in WORD.find_iter(text).take(FALLBACK_WINDOW) {
        let word = m.as_str().trim_matches(|c: char| !c.is_alphanumeric());
        if let Some(label) = yes_no(word) {
            return ParsedPrediction {
                label: Some(label),
                remainder: clean_remainder(&text[m.end()..]),
                status: ParseStatus::Fallback,
            };
        }
    }
    ParsedPrediction {
        label: None,
        remainder: text.trim().to_string(),
        status: ParseStatus::Failed,
    }
}

/// Drops a leading "Prediction: Yes|No" line from generated reasoning.
pub fn strip_prediction_line(text: &str) -> &str {
    match LEADING_ANCHOR.find(text) {
        Some(m) => text[m.end()..].trim(),
        None => text.trim(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Logprobs,
    /// No usable logprobs: the score is 1 for a parsed Yes and 0 for a No.
    LabelFallback,
}

fn normalize_token(token: &str) -> String {
    token
        .trim_start_matches([' ', '\u{2581}', '\u{120}'])
        .trim()
        .to_lowercase()
}

/// P(Yes) / (P(Yes) + P(No)) at the first generated position offering either
/// token (case and leading-space variants summed). Falls back to the parsed
/// label when the response has no such position.
pub fn score_from_logprobs(resp: &LlmResponse, predicted: Option<Label>) -> Option<(f64, ScoreSource)> {
    for position in resp.first_token_logprobs.iter().flatten() {
        let (mut yes, mut no) = (0.0f64, 0.0f64);
        for (token, lp) in position {
            match normalize_token(token).as_str() {
                "yes" => yes += lp.exp(),
                "no" => no += lp.exp(),
                _ => {}
            }
        }
        if yes + no > 0.0 {
            return Some((yes / (yes + no), ScoreSource::Logprobs));
        }
    }
    predicted.map(|l| (if l.is_like() { 1.0 } else { 0.0 }, ScoreSource::LabelFallback))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub split: Split,
    pub variant: String,
    pub task: TaskKind,
    pub gold: Label,
    pub predicted: Option<Label>,
    pub score: Option<f64>,
    pub score_source: Option<ScoreSource>,
    pub parse_status: ParseStatus,
    pub reasoning_text: String,
    pub reference_reasoning: Option<String>,
    pub similarity: Option<SimilarityScore>,
    pub cache_key: String,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub workers: usize,
    pub similarity: bool,
    /// Where partial results and `run_state.json` live while a run is in
    /// progress. Removed once the run completes.
    pub resume_dir: Option<PathBuf>,
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            workers: 4,
            similarity: true,
            resume_dir: None,
            chunk: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalRun {
    pub records: Vec<EvalRecord>,
    /// Records restored from a previous interrupted run.
    pub resumed: usize,
    /// Records with a reference whose similarity could not be computed.
    pub similarity_gaps: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend failed after {completed} of {total} records (progress saved): {source}")]
    Interrupted { completed: usize, total: usize, source: GatewayError },
    #[error("{path}: {message}")]
    State { path: PathBuf, message: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct RunState {
    fingerprint: String,
    variant: String,
    task: TaskKind,
    total: usize,
    completed: usize,
}

fn fingerprint(examples: &[&SplitExample], variant: &TemplateId, task: TaskKind, model: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("{variant}\0{task}\0{model}\0"));
    for ex in examples {
        h.update(format!("{}\0{}\0{}\n", ex.user_id, ex.split, ex.target.item_id));
    }
    hex::encode(h.finalize())
}

fn state_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::State {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn load_partial(dir: &Path, fp: &str) -> Result<Vec<EvalRecord>, HarnessError> {
    let state_path = dir.join("run_state.json");
    let Ok(raw) = std::fs::read(&state_path) else {
        return Ok(Vec::new());
    };
    let state: RunState = serde_json::from_slice(&raw).map_err(|e| state_err(&state_path, e))?;
    if state.fingerprint != fp {
        log::warn!("{}: belongs to a different run; starting over", state_path.display());
        return Ok(Vec::new());
    }
    let partial = dir.join("partial.jsonl");
    let text = std::fs::read_to_string(&partial).unwrap_or_default();
    let records: Vec<EvalRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .take(state.completed)
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(|e| state_err(&partial, e))?;
    Ok(records)
}

fn save_progress(dir: &Path, fp: &str, variant: &TemplateId, task: TaskKind, total: usize, done: &[EvalRecord]) -> Result<(), HarnessError> {
    let partial = dir.join("partial.jsonl");
    let mut body = Vec::new();
    for r in done {
        serde_json::to_writer(&mut body, r).map_err(|e| state_err(&partial, e))?;
        body.write_all(b"\n").map_err(|e| state_err(&partial, e))?;
    }
    write_atomic(&partial, &body).map_err(|e| state_err(&partial, e))?;
    let state = RunState {
        fingerprint: fp.to_string(),
        variant: variant.to_string(),
        task,
        total,
        completed: done.len(),
    };
    let path = dir.join("run_state.json");
    write_atomic(&path, &serde_json::to_vec_pretty(&state).expect("state serializes")).map_err(|e| state_err(&path, e))
}

/// Evaluates `examples` with the prediction template `variant`.
///
/// Records come back sorted by user id, then split. When the backend fails,
/// completed records are saved under `opts.resume_dir` and the next call with
/// the same inputs continues from there.
pub fn run_eval(
    examples: &[SplitExample],
    view: &ArtifactView<'_>,
    prompter: &Prompter<'_>,
    variant: &TemplateId,
    task: TaskKind,
    gateway: &Gateway,
    opts: &EvalOptions,
) -> Result<EvalRun, HarnessError> {
    let mut ordered: Vec<&SplitExample> = examples.iter().collect();
    ordered.sort_by(|a, b| (&a.user_id, a.split).cmp(&(&b.user_id, b.split)));
    let bundles = ordered
        .iter()
        .map(|ex| view.prediction_bundle(prompter, variant, task, ex))
        .collect::<Result<Vec<_>, _>>()?;
    let fp = fingerprint(&ordered, variant, task, prompter.model_id());

    let mut done = match &opts.resume_dir {
        Some(dir) => load_partial(dir, &fp)?,
        None => Vec::new(),
    };
    let resumed = done.len();
    if resumed > 0 {
        log::info!("resuming {variant} at record {resumed} of {}", ordered.len());
    }

    let mut gaps = 0;
    let indices: Vec<usize> = (resumed..ordered.len()).collect();
    for chunk in indices.chunks(opts.chunk.max(1)) {
        let results = parallel_map(chunk, opts.workers, |&i| gateway.complete(&bundles[i]));
        for (&i, result) in chunk.iter().zip(results) {
            let resp = match result {
                Ok(r) => r,
                Err(source) => {
                    let completed = done.len();
                    if let Some(dir) = &opts.resume_dir {
                        save_progress(dir, &fp, variant, task, ordered.len(), &done)?;
                    }
                    return Err(HarnessError::Interrupted {
                        completed,
                        total: ordered.len(),
                        source,
                    });
                }
            };
            let (record, gap) = build_record(ordered[i], view, variant, task, &bundles[i].cache_key, &resp, gateway, opts.similarity);
            gaps += usize::from(gap);
            done.push(record);
        }
        if let Some(dir) = &opts.resume_dir {
            save_progress(dir, &fp, variant, task, ordered.len(), &done)?;
        }
    }

    if let Some(dir) = &opts.resume_dir {
        for f in ["partial.jsonl", "run_state.json"] {
            let _ = std::fs::remove_file(dir.join(f));
        }
        let _ = std::fs::remove_dir(dir);
    }
    gaps += done[..resumed]
        .iter()
        .filter(|r| r.reference_reasoning.is_some() && r.similarity.is_none())
        .count();
    Ok(EvalRun {
        records: done,
        resumed,
        similarity_gaps: gaps,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_record(
    ex: &SplitExample,
    view: &ArtifactView<'_>,
    variant: &TemplateId,
    task: TaskKind,
    cache_key: &str,
    resp: &LlmResponse,
    gateway: &Gateway,
    want_similarity: bool,
) -> (EvalRecord, bool) {
    let parsed = parse_prediction(&resp.text);
    let scored = parsed.label.and_then(|l| score_from_logprobs(resp, Some(l)));
    let reference = view
        .reasoning(&ex.user_id, ex.split)
        .map(|r| strip_prediction_line(r).to_string());
    let mut gap = false;
    let similarity = match (&reference, want_similarity) {
        (Some(reference), true) if !parsed.remainder.trim().is_empty() && !reference.is_empty() => {
            match similarity(gateway, &parsed.remainder, reference) {
                Ok(s) => Some(s),
                Err(e) => {
                    log::warn!("similarity for {}@{} unavailable: {e}", ex.user_id, ex.split);
                    gap = true;
                    None
                }
            }
        }
        (Some(_), true) => {
            gap = true;
            None
        }
        _ => None,
    };
    let record = EvalRecord {
        user_id: ex.user_id.clone(),
        item_id: ex.target.item_id.clone(),
        split: ex.split,
        variant: variant.to_string(),
        task,
        gold: ex.target.label,
        predicted: parsed.label,
        score: scored.map(|s| s.0),
        score_source: scored.map(|s| s.1),
        parse_status: parsed.status,
        reasoning_text: parsed.remainder,
        reference_reasoning: reference,
        similarity,
        cache_key: cache_key.to_string(),
    };
    (record, gap)
}

fn similarity(gateway: &Gateway, candidate: &str, reference: &str) -> Result<SimilarityScore, String> {
    let c = gateway.embed_tokens(candidate).map_err(|e| e.to_string())?;
    let r = gateway.embed_tokens(reference).map_err(|e| e.to_string())?;
    greedy_match_score(&c, &r).map_err(|e| e.to_string())
}

pub fn write_records(records: &[EvalRecord], path: &Path) -> std::io::Result<()> {
    let mut body = Vec::new();
    for r in records {
        serde_json::to_writer(&mut body, r)?;
        body.push(b'\n');
    }
    write_atomic(path, &body)
}

pub fn read_records(path: &Path) -> std::io::Result<Vec<EvalRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}

/// Counts of parse outcomes, for run summaries.
pub fn parse_counts(records: &[EvalRecord]) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        let key = match r.parse_status {
            ParseStatus::Ok => "ok",
            ParseStatus::Fallback => "fallback",
            ParseStatus::Failed => "failed",
        };
        *m.entry(key).or_default() += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, DatasetKind, Interaction, ItemRecord, Rating, UserRecord};
    use crate::gateway::{default_params, TokenAlternatives};
    use crate::prompting::{Family, Registry};
    use crate::splitter::split_corpus;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn parses_anchor_forms() {
        let p = parse_prediction("Prediction: Yes\nThe user has shown...");
        assert_eq!((p.label, p.status), (Some(Label::Like), ParseStatus::Ok));
        assert_eq!(p.remainder, "The user has shown...");

        let p = parse_prediction("prediction: no — because...");
        assert_eq!(p.label, Some(Label::Dislike));
        assert_eq!(p.remainder, "— because...");

        let p = parse_prediction("**Prediction:** YES, the user will like it.");
        assert_eq!(p.label, Some(Label::Like));
        assert_eq!(p.remainder, "the user will like it.");

        let p = parse_prediction("I cannot determine.");
        assert_eq!((p.label, p.status), (None, ParseStatus::Failed));
    }

    #[test]
    fn fallback_window() {
        let p = parse_prediction("Sure. My answer is: No. The reasons follow.");
        assert_eq!((p.label, p.status), (Some(Label::Dislike), ParseStatus::Fallback));
        assert_eq!(p.remainder, "The reasons follow.");
        let far = format!("{} yes", "word ".repeat(10));
        assert_eq!(parse_prediction(&far).status, ParseStatus::Failed);
        // "nothing" and "yesterday" are not answers
        assert_eq!(parse_prediction("nothing happened yesterday").status, ParseStatus::Failed);
    }

    #[test]
    fn strips_leading_prediction_only() {
        assert_eq!(strip_prediction_line("Prediction: Yes 1. The user"), "1. The user");
        assert_eq!(strip_prediction_line("Prediction: No\nBecause"), "Because");
        assert_eq!(strip_prediction_line("Because. Prediction: No"), "Because. Prediction: No");
    }

    fn resp(alts: Option<Vec<TokenAlternatives>>) -> LlmResponse {
        LlmResponse {
            text: String::new(),
            first_token_logprobs: alts,
            model_id: "m".into(),
            cached: false,
        }
    }

    #[test]
    fn logprob_scores() {
        let even = TokenAlternatives::from([(" Yes".into(), -0.7), ("No".into(), -0.7)]);
        assert_eq!(score_from_logprobs(&resp(Some(vec![even])), None).unwrap().0, 0.5);

        let skewed = TokenAlternatives::from([("yes".into(), 0.9f64.ln()), (" no".into(), 0.1f64.ln())]);
        let (s, src) = score_from_logprobs(&resp(Some(vec![TokenAlternatives::from([("Prediction".into(), 0.0)]), skewed])), None).unwrap();
        assert!((s - 0.9).abs() < 1e-12);
        assert_eq!(src, ScoreSource::Logprobs);

        // case and space variants are summed
        let split = TokenAlternatives::from([
            ("Yes".into(), 0.3f64.ln()),
            (" yes".into(), 0.3f64.ln()),
            (" No".into(), 0.2f64.ln()),
        ]);
        assert!((score_from_logprobs(&resp(Some(vec![split])), None).unwrap().0 - 0.75).abs() < 1e-12);

        assert_eq!(score_from_logprobs(&resp(None), Some(Label::Like)), Some((1.0, ScoreSource::LabelFallback)));
        assert_eq!(score_from_logprobs(&resp(None), Some(Label::Dislike)), Some((0.0, ScoreSource::LabelFallback)));
        assert_eq!(score_from_logprobs(&resp(None), None), None);
    }

    fn corpus(users: usize) -> Corpus {
        let mut c = Corpus::empty(DatasetKind::Movies, 3);
        for i in 0..8 {
            let mut item = ItemRecord::bare(&format!("i{i}"));
            item.title = format!("Film {i}");
            c.items.insert(item.item_id.clone(), item);
        }
        for u in 0..users {
            let uid = format!("u{u:02}");
            let interactions = (0..5)
                .map(|j| {
                    let r = 1 + ((u * 3 + j) % 5) as i64;
                    Interaction {
                        user_id: uid.clone(),
                        item_id: format!("i{}", (u + j) % 8),
                        raw_rating: Rating::new(r).unwrap(),
                        label: if r > 3 { Label::Like } else { Label::Dislike },
                        timestamp: j as i64,
                        review_text: None,
                    }
                })
                .collect();
            c.users.insert(
                uid.clone(),
                UserRecord {
                    user_id: uid,
                    interactions,
                    profile: None,
                },
            );
        }
        c
    }

    #[test]
    fn vanilla_mock_run() {
        let c = corpus(4);
        let (examples, _) = split_corpus(&c, 5);
        let examples: Vec<_> = examples.into_iter().filter(|e| e.split != Split::Train).collect();
        let reg = Registry::builtin();
        let prompter = Prompter::new(&reg, DatasetKind::Movies, "mock");
        let view = ArtifactView::new(&c);
        let variant = TemplateId::new(Family::Vanilla, DatasetKind::Movies, "v1");
        let gw = Gateway::mock(None);
        let run = run_eval(&examples, &view, &prompter, &variant, TaskKind::ZeroShotPredict, &gw, &EvalOptions::default()).unwrap();
        assert_eq!(run.records.len(), 8);
        assert!(run.records.iter().all(|r| r.parse_status == ParseStatus::Ok));
        for r in &run.records {
            let s = r.score.unwrap();
            assert_eq!(r.score_source, Some(ScoreSource::Logprobs));
            assert_eq!(r.predicted == Some(Label::Like), s >= 0.5);
        }
        let keys: Vec<_> = run.records.iter().map(|r| (r.user_id.clone(), r.split)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let again = run_eval(&examples, &view, &prompter, &variant, TaskKind::ZeroShotPredict, &gw, &EvalOptions::default()).unwrap();
        assert_eq!(run.records, again.records);
    }

    #[test]
    fn finetuned_task_uses_its_own_params() {
        let c = corpus(1);
        let (examples, _) = split_corpus(&c, 5);
        let reg = Registry::builtin();
        let prompter = Prompter::new(&reg, DatasetKind::Movies, "mock");
        let view = ArtifactView::new(&c);
        let variant = TemplateId::new(Family::ReasoningRec, DatasetKind::Movies, "v1");
        let zs = view.prediction_bundle(&prompter, &variant, TaskKind::ZeroShotPredict, &examples[0]).unwrap();
        let ft = view.prediction_bundle(&prompter, &variant, TaskKind::FinetunedPredict, &examples[0]).unwrap();
        assert_eq!(zs.rendered, ft.rendered);
        assert_eq!(zs.decoding, default_params(TaskKind::ZeroShotPredict));
        assert_eq!(ft.decoding, default_params(TaskKind::FinetunedPredict));
        assert_ne!(zs.cache_key, ft.cache_key);
    }

    /// Mock that goes down after a fixed number of calls.
    struct Flaky {
        left: AtomicUsize,
        calls: AtomicUsize,
    }

    impl crate::gateway::Backend for Flaky {
        fn chat(&self, req: &crate::gateway::ChatRequest<'_>) -> Result<crate::gateway::BackendReply, crate::gateway::BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.left.load(Ordering::SeqCst) == 0 {
                return Err(crate::gateway::BackendError::Transient {
                    status: Some(503),
                    message: "maintenance".into(),
                });
            }
            self.left.fetch_sub(1, Ordering::SeqCst);
            crate::gateway::MockBackend::default().chat(req)
        }
        fn embed(&self, m: &str, t: &str) -> Result<crate::gateway::TokenEmbeddings, crate::gateway::BackendError> {
            crate::gateway::MockBackend::default().embed(m, t)
        }
    }

    #[test]
    fn resumes_after_outage() {
        let c = corpus(5);
        let (examples, _) = split_corpus(&c, 5);
        let examples: Vec<_> = examples.into_iter().filter(|e| e.split == Split::Test).collect();
        let reg = Registry::builtin();
        let prompter = Prompter::new(&reg, DatasetKind::Movies, "mock");
        let view = ArtifactView::new(&c);
        let variant = TemplateId::new(Family::Vanilla, DatasetKind::Movies, "v1");
        let state = tempfile::tempdir().unwrap();
        let opts = EvalOptions {
            workers: 1,
            chunk: 1,
            resume_dir: Some(state.path().join("run")),
            ..EvalOptions::default()
        };
        let flaky = Arc::new(Flaky {
            left: AtomicUsize::new(3),
            calls: AtomicUsize::new(0),
        });
        let no_retry = crate::gateway::RetryPolicy {
            max_retries: 0,
            ..Default::default()
        };
        let gw = Gateway::builder(flaky.clone(), "mock").retry(no_retry).build();
        match run_eval(&examples, &view, &prompter, &variant, TaskKind::ZeroShotPredict, &gw, &opts) {
            Err(HarnessError::Interrupted { completed: 3, total: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(state.path().join("run/run_state.json").is_file());

        flaky.left.store(100, Ordering::SeqCst);
        flaky.calls.store(0, Ordering::SeqCst);
        let run = run_eval(&examples, &view, &prompter, &variant, TaskKind::ZeroShotPredict, &gw, &opts).unwrap();
        assert_eq!(run.resumed, 3);
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 2);
        assert_eq!(run.records.len(), 5);
        assert!(!state.path().join("run").exists());

        let fresh = run_eval(&examples, &view, &prompter, &variant, TaskKind::ZeroShotPredict, &Gateway::mock(None), &EvalOptions::default()).unwrap();
        assert_eq!(fresh.records, run.records);
    }
}
