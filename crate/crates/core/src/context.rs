//! Read-only view joining the corpus with generated texts, used to render
//! reasoning and prediction prompts for split examples.

use std::collections::BTreeMap;

use crate::corpus::{Corpus, Interaction, ItemId, UserId};
use crate::gateway::TaskKind;
use crate::generation::{ArtifactKind, ArtifactStore, StoreError};
use crate::prompting::{HistoryEntry, ItemText, PromptBundle, PromptError, Prompter, TemplateId};
use crate::splitter::{Split, SplitExample};

#[derive(Debug, Clone)]
pub struct ArtifactView<'c> {
    corpus: &'c Corpus,
    descriptions: BTreeMap<ItemId, String>,
    profiles: BTreeMap<UserId, String>,
    reasoning: BTreeMap<(UserId, Split), String>,
}

impl<'c> ArtifactView<'c> {
    pub fn new(corpus: &'c Corpus) -> Self {
        ArtifactView {
            corpus,
            descriptions: BTreeMap::new(),
            profiles: BTreeMap::new(),
            reasoning: BTreeMap::new(),
        }
    }

    pub fn corpus(&self) -> &'c Corpus {
        self.corpus
    }

    pub fn with_descriptions(mut self, descriptions: BTreeMap<ItemId, String>) -> Self {
        self.descriptions = descriptions;
        self
    }

    pub fn with_profiles(mut self, profiles: BTreeMap<UserId, String>) -> Self {
        self.profiles = profiles;
        self
    }

    pub fn with_reasoning(mut self, reasoning: BTreeMap<(UserId, Split), String>) -> Self {
        self.reasoning = reasoning;
        self
    }

    pub fn load_descriptions(self, store: &ArtifactStore, template: &TemplateId) -> Result<Self, StoreError> {
        let map = store
            .texts(ArtifactKind::Description, template)?
            .into_iter()
            .map(|(s, t)| (s.id, t))
            .collect();
        Ok(self.with_descriptions(map))
    }

    pub fn load_profiles(self, store: &ArtifactStore, template: &TemplateId) -> Result<Self, StoreError> {
        let map = store
            .texts(ArtifactKind::Profile, template)?
            .into_iter()
            .map(|(s, t)| (s.id, t))
            .collect();
        Ok(self.with_profiles(map))
    }

    pub fn load_reasoning(self, store: &ArtifactStore, template: &TemplateId) -> Result<Self, StoreError> {
        let map = store
            .texts(ArtifactKind::ReasoningGt, template)?
            .into_iter()
            .filter_map(|(s, t)| Some(((s.id, s.split?), t)))
            .collect();
        Ok(self.with_reasoning(map))
    }

    pub fn descriptions(&self) -> &BTreeMap<ItemId, String> {
        &self.descriptions
    }

    pub fn profiles(&self) -> &BTreeMap<UserId, String> {
        &self.profiles
    }

    pub fn description(&self, item_id: &str) -> Option<&str> {
        self.descriptions.get(item_id).map(String::as_str)
    }

    pub fn profile(&self, user_id: &str) -> Option<&str> {
        self.profiles.get(user_id).map(String::as_str)
    }

    pub fn reasoning(&self, user_id: &str, split: Split) -> Option<&str> {
        self.reasoning.get(&(user_id.to_string(), split)).map(String::as_str)
    }

    pub fn item_text(&self, item_id: &str) -> ItemText {
        let title = self
            .corpus
            .items
            .get(item_id)
            .map(|i| i.title.clone())
            .unwrap_or_else(|| item_id.to_string());
        ItemText {
            title,
            description: self.description(item_id).map(str::to_string),
        }
    }

    pub fn history(&self, interactions: &[Interaction]) -> Vec<HistoryEntry> {
        interactions
            .iter()
            .map(|i| HistoryEntry::new(i.label, self.item_text(&i.item_id)))
            .collect()
    }

    /// Reasoning prompt conditioned on the example's gold label.
    pub fn reasoning_bundle(&self, prompter: &Prompter<'_>, ex: &SplitExample) -> Result<PromptBundle, PromptError> {
        prompter.render_reasoning_gt(
            self.profile(&ex.user_id),
            &self.history(&ex.history),
            &self.item_text(&ex.target.item_id),
            ex.target.label,
        )
    }

    /// Prediction prompt for `ex`; never sees the gold label.
    pub fn prediction_bundle(
        &self,
        prompter: &Prompter<'_>,
        variant: &TemplateId,
        task: TaskKind,
        ex: &SplitExample,
    ) -> Result<PromptBundle, PromptError> {
        prompter.render_prediction(
            variant,
            task,
            self.profile(&ex.user_id),
            &self.history(&ex.history),
            &self.item_text(&ex.target.item_id),
        )
    }
}
