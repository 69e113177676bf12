//! Run configuration: built-in defaults, then the TOML file, then environment
//! variables, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetKind, DEFAULT_THRESHOLD};
use crate::gateway::TaskKind;
use crate::generation::{DEFAULT_DESCRIPTION_WORDS, DEFAULT_PROFILE_ITEMS, DEFAULT_PROFILE_WORDS};
use crate::prompting::{Family, Registry, TemplateId, DEFAULT_CATEGORY};
use crate::sampler::DEFAULT_REVIEW_BUDGET;
use crate::splitter::Split;

use super::CliError;

pub const ENV_BASE_URL: &str = "LLM_BASE_URL";
pub const ENV_API_KEY: &str = "LLM_API_KEY";
pub const ENV_MODEL: &str = "LLM_MODEL";
pub const ENV_EMB_BASE_URL: &str = "EMB_BASE_URL";
pub const ENV_EMB_MODEL: &str = "EMB_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub pipeline: PipelineConfig,
    pub llm: LlmConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Movies: `user::movie::rating::timestamp` lines.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratings: Option<PathBuf>,
    /// Movies: `movie::title::genres` lines.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub movies: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plots: Option<PathBuf>,
    /// Products: one JSON review per line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reviews: Option<PathBuf>,
    /// Products: one JSON metadata record per line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metadata: Option<PathBuf>,
    pub threshold: u8,
    pub category: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Products,
            ratings: None,
            movies: None,
            plots: None,
            reviews: None,
            metadata: None,
            threshold: DEFAULT_THRESHOLD,
            category: DEFAULT_CATEGORY.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_root: PathBuf,
    /// Defaults to 20 for movies, 5 for products.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_core: Option<usize>,
    /// Defaults to 20 for movies, 5 for products.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history_k: Option<usize>,
    pub p: usize,
    pub n_words: usize,
    pub m: usize,
    pub q_words: usize,
    /// Template variant for descriptions, profiles and reasoning.
    pub generation_variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output_root: PathBuf::from("runs/default"),
            k_core: None,
            history_k: None,
            p: DEFAULT_REVIEW_BUDGET,
            n_words: DEFAULT_DESCRIPTION_WORDS,
            m: DEFAULT_PROFILE_ITEMS,
            q_words: DEFAULT_PROFILE_WORDS,
            generation_variant: "v1".into(),
            templates_dir: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub backend: BackendKind,
    pub base_url: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_base_url: Option<String>,
    pub embed_model: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub concurrency: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            backend: BackendKind::Mock,
            base_url: "http://127.0.0.1:8080".into(),
            api_key: None,
            model: "mock".into(),
            embed_base_url: None,
            embed_model: "mock-embedder".into(),
            timeout_secs: 120,
            max_retries: 5,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub k_shot: usize,
    pub seed: u64,
    pub stratify_labels: bool,
    /// Prediction template used for instruction prompts.
    pub variant: String,
    /// Decoding budget when evaluating a fine-tuned model.
    pub max_new_tokens: u32,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            k_shot: 64,
            seed: 7,
            stratify_labels: false,
            variant: "v1".into(),
            max_new_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub variant: String,
    pub task: TaskKind,
    pub splits: Vec<Split>,
    pub similarity: bool,
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            variant: "v1".into(),
            task: TaskKind::ZeroShotPredict,
            splits: vec![Split::Test],
            similarity: true,
            chunk: 32,
        }
    }
}

fn default_window(kind: DatasetKind) -> usize {
    match kind {
        DatasetKind::Movies => 20,
        DatasetKind::Products => 5,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("byte {}..{}", s.start, s.end)).unwrap_or_else(|| "config".into());
            CliError::config(field, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    /// Overlays the recognised environment variables.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        let get = |k: &str| get(k).filter(|v| !v.trim().is_empty());
        if let Some(v) = get(ENV_BASE_URL) {
            self.llm.base_url = v;
        }
        if let Some(v) = get(ENV_API_KEY) {
            self.llm.api_key = Some(v);
        }
        if let Some(v) = get(ENV_MODEL) {
            self.llm.model = v;
        }
        if let Some(v) = get(ENV_EMB_BASE_URL) {
            self.llm.embed_base_url = Some(v);
        }
        if let Some(v) = get(ENV_EMB_MODEL) {
            self.llm.embed_model = v;
        }
    }

    pub fn k_core(&self) -> usize {
        self.pipeline.k_core.unwrap_or_else(|| default_window(self.dataset.kind))
    }

    pub fn history_k(&self) -> usize {
        self.pipeline.history_k.unwrap_or_else(|| default_window(self.dataset.kind))
    }

    pub fn validate(&self, registry: &Registry) -> Result<(), CliError> {
        let positive = [
            ("pipeline.p", self.pipeline.p),
            ("pipeline.n_words", self.pipeline.n_words),
            ("pipeline.m", self.pipeline.m),
            ("pipeline.q_words", self.pipeline.q_words),
            ("pipeline.k_core", self.k_core()),
            ("pipeline.history_k", self.history_k()),
            ("finetune.k_shot", self.finetune.k_shot),
            ("llm.concurrency", self.llm.concurrency),
            ("eval.chunk", self.eval.chunk),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(CliError::config(field, "must be positive"));
            }
        }
        if !(1..=5).contains(&self.dataset.threshold) {
            return Err(CliError::config("dataset.threshold", "must be between 1 and 5"));
        }
        if self.finetune.max_new_tokens == 0 {
            return Err(CliError::config("finetune.max_new_tokens", "must be positive"));
        }
        if self.llm.timeout_secs == 0 {
            return Err(CliError::config("llm.timeout_secs", "must be positive"));
        }
        if self.eval.splits.is_empty() {
            return Err(CliError::config("eval.splits", "must name at least one split"));
        }
        if !self.eval.task.is_prediction() {
            return Err(CliError::config("eval.task", "must be zero_shot_predict or finetuned_predict"));
        }
        for family in [Family::ItemDescription, Family::UserProfile, Family::ReasoningGt] {
            let id = TemplateId::new(family, self.dataset.kind, self.pipeline.generation_variant.clone());
            if !registry.contains(&id) {
                return Err(CliError::config("pipeline.generation_variant", format!("no template {id}")));
            }
        }
        self.prediction_template(&self.finetune.variant, "finetune.variant", registry)?;
        self.prediction_template(&self.eval.variant, "eval.variant", registry)?;
        Ok(())
    }

    /// Resolves a prediction variant name: `vanilla`, a reasoning variant
    /// (`v1`, `no_profile`, ...), `family/variant` or `family/kind/variant`.
    pub fn prediction_template(&self, name: &str, field: &str, registry: &Registry) -> Result<TemplateId, CliError> {
        let parts: Vec<&str> = name.split('/').collect();
        let id = match parts.as_slice() {
            ["vanilla"] => Ok(TemplateId::new(Family::Vanilla, self.dataset.kind, "v1")),
            [variant] => Ok(TemplateId::new(Family::ReasoningRec, self.dataset.kind, *variant)),
            [family, variant] => family
                .parse::<Family>()
                .map(|f| TemplateId::new(f, self.dataset.kind, *variant)),
            _ => name.parse::<TemplateId>().map_err(|e| e.to_string()),
        }
        .map_err(|e| CliError::config(field, e))?;
        if !id.family.is_prediction() {
            return Err(CliError::config(field, format!("{id} is not a prediction template")));
        }
        if id.dataset_kind != self.dataset.kind {
            return Err(CliError::config(field, format!("{id} does not match dataset.kind {}", self.dataset.kind)));
        }
        if !registry.contains(&id) {
            return Err(CliError::config(field, format!("no template {id}")));
        }
        Ok(id)
    }

    /// TOML echo with secrets removed.
    pub fn echo(&self) -> String {
        let mut shown = self.clone();
        if shown.llm.api_key.is_some() {
            shown.llm.api_key = Some("<redacted>".into());
        }
        toml::to_string(&shown).expect("config serializes")
    }
}
