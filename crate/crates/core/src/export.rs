//! Instruction-tuning pairs and their JSONL export.
//!
//! A pair's prompt is the prediction prompt exactly as evaluation renders it;
//! the completion is a "Prediction: Yes|No" line followed by the stored
//! label-conditioned reasoning.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::ArtifactView;
use crate::corpus::{ItemId, Label, UserId};
use crate::fsutil::write_atomic;
use crate::gateway::TaskKind;
use crate::harness::strip_prediction_line;
use crate::prompting::{leaks_label, PromptError, Prompter, TemplateId};
use crate::sampler::apportion;
use crate::splitter::{Split, SplitExample};

pub const MAX_SEQ_LEN: usize = 2048;
pub const OBJECTIVE: &str = "maximize log P(q|p) over completion tokens";
pub const K_SHOT_SIZES: [usize; 3] = [64, 128, 256];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub id: String,
    pub user_id: UserId,
    pub item_id: ItemId,
    pub split: Split,
    pub label: Label,
    pub prompt: String,
    pub completion: String,
    pub template_variant: String,
    pub max_seq_len: usize,
    /// Prompt plus completion is estimated to exceed `max_seq_len` tokens.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub over_length: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportMeta {
    pub kind: String,
    pub objective: String,
    pub k_shot: Option<usize>,
    pub seed: Option<u64>,
    pub split: Split,
    pub template_variant: String,
    pub max_seq_len: usize,
    pub records: usize,
    pub stratified: bool,
}

impl ExportMeta {
    pub fn new(split: Split, template: &TemplateId, records: usize) -> Self {
        ExportMeta {
            kind: "meta".into(),
            objective: OBJECTIVE.into(),
            k_shot: None,
            seed: None,
            split,
            template_variant: template.to_string(),
            max_seq_len: MAX_SEQ_LEN,
            records,
            stratified: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    pub pairs: usize,
    /// Examples without a stored reasoning text.
    pub skipped: Vec<String>,
    pub over_length: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("prediction prompt for {0} contains the label conditioning phrase")]
    Leak(String),
    #[error("requested K={requested} but only {available} training pairs are available")]
    NotEnoughPairs { requested: usize, available: usize },
    #[error("nothing to export to {0}")]
    Empty(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

pub fn completion_for(label: Label, reasoning: &str) -> String {
    format!("Prediction: {}\n{}", label.answer(), strip_prediction_line(reasoning))
}

/// Rough token count (one token per four characters). The trainer does the
/// exact accounting with its own tokenizer.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

pub fn pair_id(user_id: &str, split: Split) -> String {
    format!("{user_id}-{split}")
}

/// One pair per example that has a reasoning text; the others are skipped and
/// listed in the report.
pub fn build_pairs(
    examples: &[SplitExample],
    view: &ArtifactView<'_>,
    prompter: &Prompter<'_>,
    variant: &TemplateId,
) -> Result<(Vec<InstructionPair>, BuildReport), ExportError> {
    let mut report = BuildReport::default();
    let mut pairs = Vec::with_capacity(examples.len());
    for ex in examples {
        let id = pair_id(&ex.user_id, ex.split);
        let Some(reasoning) = view.reasoning(&ex.user_id, ex.split) else {
            log::warn!("no reasoning for {id}, pair skipped");
            report.skipped.push(id);
            continue;
        };
        let bundle = view.prediction_bundle(prompter, variant, TaskKind::FinetunedPredict, ex)?;
        if leaks_label(&bundle.rendered) {
            return Err(ExportError::Leak(id));
        }
        let completion = completion_for(ex.target.label, reasoning);
        let over_length = estimate_tokens(&bundle.rendered) + estimate_tokens(&completion) > MAX_SEQ_LEN;
        report.over_length += usize::from(over_length);
        pairs.push(InstructionPair {
            id,
            user_id: ex.user_id.clone(),
            item_id: ex.target.item_id.clone(),
            split: ex.split,
            label: ex.target.label,
            prompt: bundle.rendered,
            completion,
            template_variant: variant.to_string(),
            max_seq_len: MAX_SEQ_LEN,
            over_length,
        });
    }
    report.pairs = pairs.len();
    Ok((pairs, report))
}

/// Exactly `k` pairs drawn without replacement, in shuffled order.
///
/// With `stratify` the like/dislike counts follow the pool's proportions
/// (largest remainder); otherwise the draw is uniform.
pub fn sample_k_shot(pairs: &[InstructionPair], k: usize, seed: u64, stratify: bool) -> Result<Vec<InstructionPair>, ExportError> {
    if k > pairs.len() {
        return Err(ExportError::NotEnoughPairs {
            requested: k,
            available: pairs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<InstructionPair> = if stratify {
        let (mut likes, mut dislikes): (Vec<_>, Vec<_>) = pairs.iter().cloned().partition(|p| p.label.is_like());
        let alloc = apportion(&[likes.len(), dislikes.len()], k);
        likes.shuffle(&mut rng);
        dislikes.shuffle(&mut rng);
        likes.truncate(alloc[0]);
        dislikes.truncate(alloc[1]);
        likes.into_iter().chain(dislikes).collect()
    } else {
        let mut all = pairs.to_vec();
        all.shuffle(&mut rng);
        all.truncate(k);
        all
    };
    if stratify {
        out.shuffle(&mut rng);
    }
    Ok(out)
}

/// Meta header line followed by one line per pair.
pub fn export_jsonl(pairs: &[InstructionPair], meta: &ExportMeta, path: &Path) -> Result<(), ExportError> {
    if pairs.is_empty() {
        return Err(ExportError::Empty(path.to_path_buf()));
    }
    let mut body = serde_json::to_string(meta).expect("meta serializes");
    body.push('\n');
    for p in pairs {
        body.push_str(&serde_json::to_string(p).expect("pair serializes"));
        body.push('\n');
    }
    write_atomic(path, body.as_bytes()).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn import_jsonl(path: &Path) -> Result<(ExportMeta, Vec<InstructionPair>), ExportError> {
    let io = |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut meta = None;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| ExportError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        };
        if meta.is_none() {
            meta = Some(serde_json::from_str::<ExportMeta>(&line).map_err(parse_err)?);
        } else {
            pairs.push(serde_json::from_str(&line).map_err(parse_err)?);
        }
    }
    let meta = meta.ok_or_else(|| ExportError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "missing meta header".into(),
    })?;
    Ok((meta, pairs))
}
