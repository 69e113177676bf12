//! The three generation stages: item descriptions, user profiles, and
//! label-conditioned reasoning. Each stage is planned (prompts rendered) and
//! then executed through the gateway; results land in an [`ArtifactStore`].

mod store;

use serde::Serialize;

pub use store::{ArtifactKind, ArtifactStore, GenerationArtifact, IndexEntry, StoreError, Subject};

use crate::context::ArtifactView;
use crate::corpus::{Corpus, Interaction, UserId, UserRecord};
use crate::gateway::{parallel_map, Gateway};
use crate::prompting::{PromptBundle, PromptError, Prompter};
use crate::sampler::select_reviews;
use crate::splitter::SplitExample;

pub const DEFAULT_PROFILE_ITEMS: usize = 15;
pub const DEFAULT_PROFILE_WORDS: usize = 100;
pub const DEFAULT_DESCRIPTION_WORDS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileWindow {
    /// Earliest first.
    pub prefix: Vec<Interaction>,
    pub m_used: usize,
}

/// Length of the profile window: `min(m, max(0, n - k))`.
pub fn profile_window_len(n: usize, m: usize, k: usize) -> usize {
    m.min(n.saturating_sub(k))
}

/// The first interactions of `user`, at most `m`, none of them among the
/// most recent `k`.
pub fn compute_profile_window(user: &UserRecord, m: usize, k: usize) -> ProfileWindow {
    let len = profile_window_len(user.interactions.len(), m, k);
    ProfileWindow {
        prefix: user.interactions[..len].to_vec(),
        m_used: len,
    }
}

/// One LLM call to make and where its result goes.
#[derive(Debug, Clone)]
pub struct Job {
    pub kind: ArtifactKind,
    pub subject: Subject,
    pub bundle: PromptBundle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct JobFailure {
    pub subject: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub jobs: usize,
    pub stored: usize,
    pub failed: Vec<JobFailure>,
    /// Subjects deliberately left without an artifact (e.g. users with an
    /// empty profile window).
    pub flagged: Vec<String>,
    /// Prompts rendered with some input missing.
    pub prompts_with_warnings: usize,
}

pub fn plan_descriptions(corpus: &Corpus, prompter: &Prompter<'_>, p: usize, n_words: usize, seed: u64) -> Result<Vec<Job>, PromptError> {
    corpus
        .items
        .values()
        .filter(|item| !item.title.trim().is_empty())
        .map(|item| {
            let sample = select_reviews(item, p, seed);
            Ok(Job {
                kind: ArtifactKind::Description,
                subject: Subject::item(&item.item_id),
                bundle: prompter.render_item_description(item, &sample, n_words)?,
            })
        })
        .collect()
}

/// Profile jobs plus the users whose window is empty.
pub fn plan_profiles(
    view: &ArtifactView<'_>,
    prompter: &Prompter<'_>,
    m: usize,
    k: usize,
    q_words: usize,
) -> Result<(Vec<Job>, Vec<UserId>), PromptError> {
    let mut jobs = Vec::new();
    let mut flagged = Vec::new();
    for user in view.corpus().users.values() {
        let window = compute_profile_window(user, m, k);
        if window.prefix.is_empty() {
            flagged.push(user.user_id.clone());
            continue;
        }
        jobs.push(Job {
            kind: ArtifactKind::Profile,
            subject: Subject::user(&user.user_id),
            bundle: prompter.render_user_profile(&view.history(&window.prefix), q_words)?,
        });
    }
    Ok((jobs, flagged))
}

pub fn plan_reasoning(view: &ArtifactView<'_>, prompter: &Prompter<'_>, examples: &[SplitExample]) -> Result<Vec<Job>, PromptError> {
    examples
        .iter()
        .map(|ex| {
            Ok(Job {
                kind: ArtifactKind::ReasoningGt,
                subject: Subject::example(&ex.user_id, ex.split),
                bundle: view.reasoning_bundle(prompter, ex)?,
            })
        })
        .collect()
}

/// Jobs whose response is not yet cached.
pub fn uncached(jobs: &[Job], gateway: &Gateway) -> usize {
    jobs.iter().filter(|j| !gateway.is_cached(&j.bundle.cache_key)).count()
}

/// Executes `jobs` with up to `workers` concurrent requests. Failures are
/// reported, never fatal. The store is flushed at the end.
pub fn run_jobs(stage: &str, jobs: &[Job], gateway: &Gateway, store: &ArtifactStore, workers: usize) -> Result<StageReport, StoreError> {
    let outcomes = parallel_map(jobs, workers, |job| {
        let resp = gateway.complete(&job.bundle).map_err(|e| e.to_string())?;
        let text = resp.text.trim();
        if text.is_empty() {
            return Err("empty completion".to_string());
        }
        store
            .put(&GenerationArtifact {
                kind: job.kind,
                subject: job.subject.clone(),
                text: text.to_string(),
                model_id: resp.model_id,
                template: job.bundle.template.clone(),
                cache_key: job.bundle.cache_key.clone(),
            })
            .map_err(|e| e.to_string())
    });
    let mut report = StageReport {
        stage: stage.to_string(),
        jobs: jobs.len(),
        prompts_with_warnings: jobs.iter().filter(|j| !j.bundle.warnings.is_empty()).count(),
        ..StageReport::default()
    };
    for (job, outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(()) => report.stored += 1,
            Err(error) => {
                log::warn!("{stage}: {} failed: {error}", job.subject);
                report.failed.push(JobFailure {
                    subject: job.subject.to_string(),
                    error,
                });
            }
        }
    }
    store.flush()?;
    Ok(report)
}

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub fn generate_descriptions(
    corpus: &Corpus,
    prompter: &Prompter<'_>,
    gateway: &Gateway,
    store: &ArtifactStore,
    p: usize,
    n_words: usize,
    seed: u64,
) -> Result<StageReport, GenerationError> {
    let jobs = plan_descriptions(corpus, prompter, p, n_words, seed)?;
    Ok(run_jobs("descriptions", &jobs, gateway, store, gateway.concurrency())?)
}

pub fn generate_profiles(
    view: &ArtifactView<'_>,
    prompter: &Prompter<'_>,
    gateway: &Gateway,
    store: &ArtifactStore,
    m: usize,
    k: usize,
    q_words: usize,
) -> Result<StageReport, GenerationError> {
    let (jobs, flagged) = plan_profiles(view, prompter, m, k, q_words)?;
    let mut report = run_jobs("profiles", &jobs, gateway, store, gateway.concurrency())?;
    report.flagged = flagged;
    Ok(report)
}

pub fn generate_reasoning_gt(
    view: &ArtifactView<'_>,
    prompter: &Prompter<'_>,
    gateway: &Gateway,
    store: &ArtifactStore,
    examples: &[SplitExample],
) -> Result<StageReport, GenerationError> {
    let jobs = plan_reasoning(view, prompter, examples)?;
    Ok(run_jobs("reasoning", &jobs, gateway, store, gateway.concurrency())?)
}
