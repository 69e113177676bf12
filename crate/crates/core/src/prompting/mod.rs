//! Versioned prompt templates and the renderers that fill them.

mod registry;
mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use registry::Registry;
pub use template::{has_template_syntax, Slots, Template, TemplateError};

use crate::corpus::{DatasetKind, ItemRecord, Label};
use crate::gateway::{default_params, DecodingParams, TaskKind};
use crate::sampler::{trim_words, ReviewSample, REVIEW_WORD_LIMIT};

/// Phrase that carries the gold label in reasoning prompts. It must never
/// appear in a prediction prompt (matched case-insensitively).
pub const CONDITIONING_PHRASE: &str = "we know that the user will";

pub const DEFAULT_CATEGORY: &str = "beauty";

pub fn leaks_label(prompt: &str) -> bool {
    prompt.to_lowercase().contains(CONDITIONING_PHRASE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ItemDescription,
    UserProfile,
    ReasoningGt,
    ReasoningRec,
    Vanilla,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::ItemDescription,
        Family::UserProfile,
        Family::ReasoningGt,
        Family::ReasoningRec,
        Family::Vanilla,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::ItemDescription => "item_description",
            Family::UserProfile => "user_profile",
            Family::ReasoningGt => "reasoning_gt",
            Family::ReasoningRec => "reasoning_rec",
            Family::Vanilla => "vanilla",
        }
    }

    pub fn is_prediction(self) -> bool {
        matches!(self, Family::ReasoningRec | Family::Vanilla)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown template family {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TemplateId {
    pub family: Family,
    pub dataset_kind: DatasetKind,
    pub variant: String,
}

impl TemplateId {
    pub fn new(family: Family, dataset_kind: DatasetKind, variant: impl Into<String>) -> Self {
        TemplateId {
            family,
            dataset_kind,
            variant: variant.into(),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.family, self.dataset_kind, self.variant)
    }
}

impl FromStr for TemplateId {
    type Err = String;

    /// Parses `family/kind/variant`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        let [family, kind, variant] = parts[..] else {
            return Err(format!("template id {s:?} is not family/kind/variant"));
        };
        if variant.is_empty() {
            return Err(format!("template id {s:?} has an empty variant"));
        }
        Ok(TemplateId::new(family.parse()?, kind.parse()?, variant))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("template {id} belongs to family {actual}, expected {expected}")]
    WrongFamily { id: String, expected: String, actual: Family },
    #[error("profile unavailable: the history prefix is empty")]
    ProfileUnavailable,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("rendering {id}: {source}")]
    Render { id: String, source: TemplateError },
    #[error("loading templates: {0}")]
    Load(String),
}

/// A fully rendered request, ready for the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub template: TemplateId,
    pub task: TaskKind,
    pub rendered: String,
    pub decoding: DecodingParams,
    pub model_id: String,
    /// Hex SHA-256 of model id, decoding parameters and rendered text.
    pub cache_key: String,
    /// Inputs that were missing and left out of the prompt.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PromptBundle {
    pub fn new(
        template: TemplateId,
        task: TaskKind,
        rendered: String,
        decoding: DecodingParams,
        model_id: impl Into<String>,
    ) -> Self {
        let model_id = model_id.into();
        let cache_key = cache_key(&rendered, &decoding, &model_id);
        PromptBundle {
            template,
            task,
            rendered,
            decoding,
            model_id,
            cache_key,
            warnings: Vec::new(),
        }
    }
}

pub fn cache_key(rendered: &str, decoding: &DecodingParams, model_id: &str) -> String {
    let params = serde_json::to_string(decoding).expect("params serialize");
    let digest = Sha256::new()
        .chain_update(model_id.as_bytes())
        .chain_update(b"\0")
        .chain_update(params.as_bytes())
        .chain_update(b"\0")
        .chain_update(rendered.as_bytes())
        .finalize();
    hex::encode(digest)
}

/// How an item appears inside a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemText {
    pub title: String,
    pub description: Option<String>,
}

impl ItemText {
    pub fn of(item: &ItemRecord) -> Self {
        ItemText {
            title: item.title.clone(),
            description: item.description.clone().filter(|d| !d.trim().is_empty()),
        }
    }

    fn full(&self) -> String {
        match &self.description {
            Some(d) => format!("{}. Description: {d}", self.title),
            None => self.title.clone(),
        }
    }

    fn description_or_title(&self) -> &str {
        self.description.as_deref().unwrap_or(&self.title)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub label: Label,
    pub item: ItemText,
}

impl HistoryEntry {
    pub fn new(label: Label, item: ItemText) -> Self {
        HistoryEntry { label, item }
    }
}

fn history_lines(entries: &[HistoryEntry], line: impl Fn(&HistoryEntry) -> String) -> String {
    entries.iter().map(line).collect::<Vec<_>>().join("\n")
}

/// Renders prompts for one dataset kind against a registry.
#[derive(Debug, Clone)]
pub struct Prompter<'r> {
    registry: &'r Registry,
    kind: DatasetKind,
    category: String,
    model_id: String,
    generation_variant: String,
    params: BTreeMap<TaskKind, DecodingParams>,
}

impl<'r> Prompter<'r> {
    pub fn new(registry: &'r Registry, kind: DatasetKind, model_id: impl Into<String>) -> Self {
        Prompter {
            registry,
            kind,
            category: DEFAULT_CATEGORY.into(),
            model_id: model_id.into(),
            generation_variant: "v1".into(),
            params: BTreeMap::new(),
        }
    }

    /// Product category named in the role line ("fashion", "beauty", ...).
    pub fn category(mut self, category: impl Into<String>) -> Self {
        self.category = category.into();
        self
    }

    /// Variant used for the three generation families.
    pub fn generation_variant(mut self, variant: impl Into<String>) -> Self {
        self.generation_variant = variant.into();
        self
    }

    pub fn with_params(mut self, task: TaskKind, params: DecodingParams) -> Self {
        self.params.insert(task, params);
        self
    }

    pub fn params(&self, task: TaskKind) -> DecodingParams {
        self.params.get(&task).copied().unwrap_or_else(|| default_params(task))
    }

    pub fn registry(&self) -> &'r Registry {
        self.registry
    }

    pub fn dataset_kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn template_id(&self, family: Family) -> TemplateId {
        TemplateId::new(family, self.kind, self.generation_variant.clone())
    }

    fn base_slots(&self) -> Slots {
        Slots::from([("category", self.category.clone())])
    }

    fn finish(&self, id: TemplateId, task: TaskKind, slots: &Slots, warnings: Vec<String>) -> Result<PromptBundle, PromptError> {
        let template = self.registry.get(&id)?;
        let rendered = template.render(slots).map_err(|source| PromptError::Render {
            id: id.to_string(),
            source,
        })?;
        debug_assert!(!has_template_syntax(&rendered));
        let mut bundle = PromptBundle::new(id, task, rendered, self.params(task), self.model_id.clone());
        bundle.warnings = warnings;
        Ok(bundle)
    }

    pub fn render_item_description(
        &self,
        item: &ItemRecord,
        sample: &ReviewSample,
        n_words: usize,
    ) -> Result<PromptBundle, PromptError> {
        if n_words == 0 {
            return Err(PromptError::InvalidArgument("n_words must be >= 1".into()));
        }
        let mut slots = self.base_slots();
        let mut warnings = Vec::new();
        slots.insert("title", item.title.clone());
        slots.insert("n_words", n_words.to_string());
        match self.kind {
            DatasetKind::Movies => {
                for key in ["year", "genre", "plot"] {
                    let value = item.metadata.get(key).cloned().unwrap_or_default();
                    if value.trim().is_empty() && key != "genre" {
                        warnings.push(format!("item {} has no {key}", item.item_id));
                    }
                    slots.insert(key, value);
                }
            }
            DatasetKind::Products => {
                let metadata = item
                    .metadata
                    .iter()
                    .filter(|(_, v)| !v.trim().is_empty())
                    .map(|(k, v)| format!("{k}: {}", trim_words(v, REVIEW_WORD_LIMIT)))
                    .collect::<Vec<_>>()
                    .join("; ");
                slots.insert("metadata", metadata);
                if sample.selected.is_empty() {
                    warnings.push(format!("item {} has no reviews", item.item_id));
                }
                let reviews = sample
                    .selected
                    .iter()
                    .map(|(r, text)| format!("- Rated {}/5: {text}", r.value()))
                    .collect::<Vec<_>>()
                    .join("\n");
                slots.insert("reviews", reviews);
            }
        }
        self.finish(self.template_id(Family::ItemDescription), TaskKind::ItemDescription, &slots, warnings)
    }

    /// `prefix` in chronological order; each entry shown by its description.
    pub fn render_user_profile(&self, prefix: &[HistoryEntry], q_words: usize) -> Result<PromptBundle, PromptError> {
        if prefix.is_empty() {
            return Err(PromptError::ProfileUnavailable);
        }
        if q_words == 0 {
            return Err(PromptError::InvalidArgument("q_words must be >= 1".into()));
        }
        let mut slots = self.base_slots();
        slots.insert(
            "history",
            history_lines(prefix, |e| format!("{} {}", e.label.past_tense(), e.item.description_or_title())),
        );
        slots.insert("q_words", q_words.to_string());
        let warnings = missing_descriptions(prefix);
        self.finish(self.template_id(Family::UserProfile), TaskKind::UserProfile, &slots, warnings)
    }

    pub fn render_reasoning_gt(
        &self,
        profile: Option<&str>,
        history: &[HistoryEntry],
        target: &ItemText,
        target_label: Label,
    ) -> Result<PromptBundle, PromptError> {
        let mut slots = self.item_slots(history, target);
        slots.insert("profile", profile.unwrap_or_default().to_string());
        slots.insert("verb", target_label.verb().to_string());
        let mut warnings = missing_descriptions(history);
        if target.description.is_none() {
            warnings.push(format!("target {:?} has no description", target.title));
        }
        self.finish(self.template_id(Family::ReasoningGt), TaskKind::ReasoningGt, &slots, warnings)
    }

    /// Prediction prompt for a `reasoning_rec` or `vanilla` template. Inputs the
    /// template does not mention (a profile for `no_profile`, descriptions for
    /// title-only variants) are ignored.
    pub fn render_prediction(
        &self,
        variant: &TemplateId,
        task: TaskKind,
        profile: Option<&str>,
        history: &[HistoryEntry],
        target: &ItemText,
    ) -> Result<PromptBundle, PromptError> {
        if !variant.family.is_prediction() {
            return Err(PromptError::WrongFamily {
                id: variant.to_string(),
                expected: "reasoning_rec or vanilla".into(),
                actual: variant.family,
            });
        }
        if variant.dataset_kind != self.kind {
            return Err(PromptError::InvalidArgument(format!(
                "template {variant} does not match dataset kind {}",
                self.kind
            )));
        }
        let mut slots = self.item_slots(history, target);
        slots.insert("profile", profile.unwrap_or_default().to_string());
        let mut warnings = Vec::new();
        if self.registry.uses_profile(variant)? && profile.is_none_or(|p| p.trim().is_empty()) {
            warnings.push("profile unavailable; profile block omitted".to_string());
        }
        if self.registry.uses_descriptions(variant)? {
            warnings.extend(missing_descriptions(history));
            if target.description.is_none() {
                warnings.push(format!("target {:?} has no description", target.title));
            }
        }
        self.finish(variant.clone(), task, &slots, warnings)
    }

    fn item_slots(&self, history: &[HistoryEntry], target: &ItemText) -> Slots {
        let mut slots = self.base_slots();
        slots.insert(
            "history",
            history_lines(history, |e| format!("{} {}", e.label.past_tense(), e.item.full())),
        );
        slots.insert(
            "history_titles",
            history_lines(history, |e| format!("{} {}", e.label.past_tense(), e.item.title)),
        );
        // templates punctuate after the target themselves
        slots.insert("target", target.full().trim_end_matches('.').to_string());
        slots.insert("target_title", target.title.clone());
        slots
    }
}

fn missing_descriptions(entries: &[HistoryEntry]) -> Vec<String> {
    let n = entries.iter().filter(|e| e.item.description.is_none()).count();
    if n == 0 {
        Vec::new()
    } else {
        vec![format!("{n} history item(s) without description; titles used")]
    }
}
