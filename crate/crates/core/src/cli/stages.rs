use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{BackendKind, RunConfig};
use super::{CliError, GenTarget, RunSummary};
use crate::context::ArtifactView;
use crate::corpus::{apply_k_core, parse_movie_dataset, parse_product_dataset, read_canonical, write_canonical, Corpus, DatasetKind};
use crate::export::{build_pairs, export_jsonl, sample_k_shot, ExportError, ExportMeta, InstructionPair};
use crate::fsutil::{copy_dir, write_atomic};
use crate::gateway::{Gateway, HttpBackend, MockBackend, RetryPolicy, TaskKind};
use crate::generation::{plan_descriptions, plan_profiles, plan_reasoning, run_jobs, uncached, ArtifactStore, Job, StageReport};
use crate::harness::{parse_counts, read_records, run_eval, write_records, EvalOptions, HarnessError};
use crate::metrics::{aggregate_report, summarize};
use crate::prompting::{Family, Prompter, Registry, TemplateId};
use crate::splitter::{load_examples, split_corpus, write_manifest, Split, SplitExample};
use crate::synthetic::{generate, SyntheticSpec};

const CORPUS_FILE: &str = "corpus.jsonl";
const MANIFEST_FILE: &str = "manifest.jsonl";
const CONFIG_ECHO: &str = "config.toml";

/// A stage output directory written as a whole: work happens in a sibling
/// temp directory that replaces the final one on `commit`. Dropping without
/// committing discards the temp directory.
pub struct StageDir {
    final_dir: PathBuf,
    tmp: PathBuf,
    committed: bool,
}

impl StageDir {
    /// With `keep_previous` the temp directory starts as a copy of the
    /// current stage contents.
    pub fn begin(root: &Path, stage: &str, keep_previous: bool) -> std::io::Result<StageDir> {
        let final_dir = root.join(stage);
        let tmp = root.join(format!(".{stage}.tmp-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        if keep_previous && final_dir.is_dir() {
            copy_dir(&final_dir, &tmp)?;
        } else {
            std::fs::create_dir_all(&tmp)?;
        }
        Ok(StageDir {
            final_dir,
            tmp,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn commit(mut self, config_echo: &str) -> std::io::Result<PathBuf> {
        write_atomic(&self.tmp.join(CONFIG_ECHO), config_echo.as_bytes())?;
        let parent = self.final_dir.parent().expect("stage dir has a parent");
        let old = parent.join(format!(
            ".{}.old-{}",
            self.final_dir.file_name().and_then(|n| n.to_str()).unwrap_or("stage"),
            std::process::id()
        ));
        if self.final_dir.exists() {
            if old.exists() {
                std::fs::remove_dir_all(&old)?;
            }
            std::fs::rename(&self.final_dir, &old)?;
        }
        std::fs::rename(&self.tmp, &self.final_dir)?;
        if old.exists() {
            std::fs::remove_dir_all(&old)?;
        }
        self.committed = true;
        Ok(self.final_dir.clone())
    }
}

impl Drop for StageDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}

fn json_bytes(v: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializes");
    out.push(b'\n');
    out
}

pub(super) struct Context {
    cfg: RunConfig,
    registry: Registry,
    root: PathBuf,
    dry_run: bool,
}

impl Context {
    pub fn new(cfg: RunConfig, dry_run: bool) -> Result<Self, CliError> {
        let registry = match &cfg.pipeline.templates_dir {
            Some(dir) => Registry::with_overrides(dir).map_err(|e| CliError::config("pipeline.templates_dir", e.to_string()))?,
            None => Registry::builtin(),
        };
        cfg.validate(&registry)?;
        let root = cfg.pipeline.output_root.clone();
        Ok(Context {
            cfg,
            registry,
            root,
            dry_run,
        })
    }

    fn io(&self, stage: &str) -> impl Fn(std::io::Error) -> CliError + '_ {
        let stage = stage.to_string();
        move |e| CliError::failed(&stage, e)
    }

    fn require(&self, stage: &str, file: &str) -> Result<PathBuf, CliError> {
        let path = self.root.join(stage).join(file);
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::MissingUpstream {
                stage: stage.into(),
                path,
            })
        }
    }

    fn gateway(&self) -> Gateway {
        let llm = &self.cfg.llm;
        let retry = RetryPolicy {
            max_retries: llm.max_retries,
            ..RetryPolicy::default()
        };
        let timeout = Duration::from_secs(llm.timeout_secs);
        let builder = match llm.backend {
            BackendKind::Mock => Gateway::builder(Arc::new(MockBackend::default()), llm.model.clone()),
            BackendKind::Http => {
                let chat = Arc::new(HttpBackend::new(llm.base_url.clone(), llm.api_key.clone(), timeout));
                let emb_url = llm.embed_base_url.clone().unwrap_or_else(|| llm.base_url.clone());
                let emb = Arc::new(HttpBackend::new(emb_url, llm.api_key.clone(), timeout));
                Gateway::builder(chat, llm.model.clone()).embedder(emb, llm.embed_model.clone())
            }
        };
        builder
            .cache_dir(self.root.join("cache"))
            .retry(retry)
            .concurrency(llm.concurrency)
            .build()
    }

    fn prompter(&self) -> Prompter<'_> {
        let mut finetuned = crate::gateway::default_params(TaskKind::FinetunedPredict);
        finetuned.max_new_tokens = self.cfg.finetune.max_new_tokens;
        Prompter::new(&self.registry, self.cfg.dataset.kind, self.cfg.llm.model.clone())
            .category(self.cfg.dataset.category.clone())
            .generation_variant(self.cfg.pipeline.generation_variant.clone())
            .with_params(TaskKind::FinetunedPredict, finetuned)
    }

    fn load_corpus(&self) -> Result<Corpus, CliError> {
        let path = self.require("kcore", CORPUS_FILE)?;
        read_canonical(&path).map_err(|e| CliError::failed("kcore", e))
    }

    fn load_examples(&self, corpus: &Corpus) -> Result<Vec<SplitExample>, CliError> {
        let path = self.require("split", MANIFEST_FILE)?;
        load_examples(&path, corpus).map_err(|e| CliError::failed("split", e))
    }

    fn store(&self, stage: &str) -> Result<ArtifactStore, CliError> {
        let dir = self.root.join(stage);
        if !dir.is_dir() {
            return Err(CliError::MissingUpstream { stage: stage.into(), path: dir });
        }
        ArtifactStore::open(dir).map_err(|e| CliError::failed(stage, e))
    }

    /// Corpus view with whichever generated texts exist; `need` lists the
    /// stages that must be present.
    fn view<'c>(&self, corpus: &'c Corpus, need: &[&str]) -> Result<ArtifactView<'c>, CliError> {
        let p = self.prompter();
        let mut view = ArtifactView::new(corpus);
        let sources = [
            ("descriptions", Family::ItemDescription),
            ("profiles", Family::UserProfile),
            ("reasoning", Family::ReasoningGt),
        ];
        for (stage, family) in sources {
            let present = self.root.join(stage).is_dir();
            if !present {
                if need.contains(&stage) {
                    return Err(CliError::MissingUpstream {
                        stage: stage.into(),
                        path: self.root.join(stage),
                    });
                }
                continue;
            }
            let store = self.store(stage)?;
            let tpl = p.template_id(family);
            let err = |e| CliError::failed(stage, e);
            view = match family {
                Family::ItemDescription => view.load_descriptions(&store, &tpl).map_err(err)?,
                Family::UserProfile => view.load_profiles(&store, &tpl).map_err(err)?,
                _ => view.load_reasoning(&store, &tpl).map_err(err)?,
            };
        }
        Ok(view)
    }

    fn summary(&self, command: &str, gateway: Option<&Gateway>, outputs: Vec<PathBuf>, details: Value) -> RunSummary {
        RunSummary {
            command: command.into(),
            dry_run: self.dry_run,
            backend_calls: gateway.map_or(0, Gateway::backend_calls),
            outputs,
            details,
        }
    }

    pub fn ingest(&self) -> Result<RunSummary, CliError> {
        let d = &self.cfg.dataset;
        let need = |v: &Option<PathBuf>, field: &str| {
            v.clone().ok_or_else(|| CliError::config(field, "input path is required for ingest"))
        };
        let ingested = match d.kind {
            DatasetKind::Products => {
                let reviews = need(&d.reviews, "dataset.reviews")?;
                let metadata = need(&d.metadata, "dataset.metadata")?;
                parse_product_dataset(&reviews, &metadata, d.threshold)
            }
            DatasetKind::Movies => {
                let ratings = need(&d.ratings, "dataset.ratings")?;
                let movies = need(&d.movies, "dataset.movies")?;
                parse_movie_dataset(&ratings, &movies, d.plots.as_deref(), d.threshold)
            }
        }
        .map_err(|e| CliError::failed("ingest", e))?;
        let details = json!({
            "users": ingested.corpus.users.len(),
            "items": ingested.corpus.items.len(),
            "report": ingested.report,
        });
        if self.dry_run {
            return Ok(self.summary("ingest", None, vec![], details));
        }
        let stage = StageDir::begin(&self.root, "ingest", false).map_err(self.io("ingest"))?;
        write_canonical(&ingested.corpus, &stage.path().join(CORPUS_FILE)).map_err(|e| CliError::failed("ingest", e))?;
        write_atomic(&stage.path().join("report.json"), &json_bytes(&details)).map_err(self.io("ingest"))?;
        let out = stage.commit(&self.cfg.echo()).map_err(self.io("ingest"))?;
        Ok(self.summary("ingest", None, vec![out], details))
    }

    pub fn kcore(&self) -> Result<RunSummary, CliError> {
        let path = self.require("ingest", CORPUS_FILE)?;
        let corpus = read_canonical(&path).map_err(|e| CliError::failed("ingest", e))?;
        let k = self.cfg.k_core();
        let kept = apply_k_core(&corpus, k);
        let details = json!({
            "k": k,
            "users_before": corpus.users.len(),
            "users_after": kept.users.len(),
            "items_before": corpus.items.len(),
            "items_after": kept.items.len(),
            "interactions_after": kept.interaction_count(),
        });
        if self.dry_run {
            return Ok(self.summary("kcore", None, vec![], details));
        }
        let stage = StageDir::begin(&self.root, "kcore", false).map_err(self.io("kcore"))?;
        write_canonical(&kept, &stage.path().join(CORPUS_FILE)).map_err(|e| CliError::failed("kcore", e))?;
        write_atomic(&stage.path().join("report.json"), &json_bytes(&details)).map_err(self.io("kcore"))?;
        let out = stage.commit(&self.cfg.echo()).map_err(self.io("kcore"))?;
        Ok(self.summary("kcore", None, vec![out], details))
    }

    pub fn split(&self) -> Result<RunSummary, CliError> {
        let corpus = self.load_corpus()?;
        let (examples, report) = split_corpus(&corpus, self.cfg.history_k());
        let details = json!({ "history_k": self.cfg.history_k(), "report": report });
        if self.dry_run {
            return Ok(self.summary("split", None, vec![], details));
        }
        let stage = StageDir::begin(&self.root, "split", false).map_err(self.io("split"))?;
        write_manifest(&examples, &stage.path().join(MANIFEST_FILE)).map_err(|e| CliError::failed("split", e))?;
        write_atomic(&stage.path().join("report.json"), &json_bytes(&details)).map_err(self.io("split"))?;
        let out = stage.commit(&self.cfg.echo()).map_err(self.io("split"))?;
        Ok(self.summary("split", None, vec![out], details))
    }

    pub fn generate(&self, what: GenTarget) -> Result<RunSummary, CliError> {
        let (stage_name, command) = match what {
            GenTarget::Descriptions => ("descriptions", "gen descriptions"),
            GenTarget::Profiles => ("profiles", "gen profiles"),
            GenTarget::Reasoning => ("reasoning", "gen reasoning"),
        };
        let corpus = self.load_corpus()?;
        let prompter = self.prompter();
        let prompt_err = |e| CliError::failed(stage_name, e);
        let (jobs, flagged): (Vec<Job>, Vec<String>) = match what {
            GenTarget::Descriptions => {
                let pc = &self.cfg.pipeline;
                (plan_descriptions(&corpus, &prompter, pc.p, pc.n_words, pc.seed).map_err(prompt_err)?, vec![])
            }
            GenTarget::Profiles => {
                let view = self.view(&corpus, &["descriptions"])?;
                plan_profiles(&view, &prompter, self.cfg.pipeline.m, self.cfg.history_k(), self.cfg.pipeline.q_words)
                    .map_err(prompt_err)?
            }
            GenTarget::Reasoning => {
                let examples = self.load_examples(&corpus)?;
                let view = self.view(&corpus, &["descriptions", "profiles"])?;
                (plan_reasoning(&view, &prompter, &examples).map_err(prompt_err)?, vec![])
            }
        };
        let gateway = self.gateway();
        if self.dry_run {
            let details = json!({
                "jobs": jobs.len(),
                "estimated_backend_calls": uncached(&jobs, &gateway),
                "flagged": flagged.len(),
            });
            return Ok(self.summary(command, Some(&gateway), vec![], details));
        }
        let stage = StageDir::begin(&self.root, stage_name, true).map_err(self.io(stage_name))?;
        let store = ArtifactStore::open(stage.path()).map_err(|e| CliError::failed(stage_name, e))?;
        let mut report: StageReport = run_jobs(stage_name, &jobs, &gateway, &store, gateway.concurrency())
            .map_err(|e| CliError::failed(stage_name, e))?;
        report.flagged = flagged;
        write_atomic(&stage.path().join("stage.json"), &json_bytes(&report)).map_err(self.io(stage_name))?;
        let out = stage.commit(&self.cfg.echo()).map_err(self.io(stage_name))?;
        if !report.failed.is_empty() {
            return Err(CliError::failed(
                stage_name,
                format!("{} of {} jobs failed (completed results kept; rerun to retry)", report.failed.len(), report.jobs),
            ));
        }
        let details = serde_json::to_value(&report).expect("report serializes");
        Ok(self.summary(command, Some(&gateway), vec![out], details))
    }

    pub fn export(&self) -> Result<RunSummary, CliError> {
        let corpus = self.load_corpus()?;
        let examples = self.load_examples(&corpus)?;
        let variant = self
            .cfg
            .prediction_template(&self.cfg.finetune.variant, "finetune.variant", &self.registry)?;
        let need = self.stages_needed(&variant, &["reasoning"])?;
        let view = self.view(&corpus, &need)?;
        let prompter = self.prompter();
        let (pairs, build) = build_pairs(&examples, &view, &prompter, &variant).map_err(|e| CliError::failed("export", e))?;
        let ft = &self.cfg.finetune;
        let mut by_split: BTreeMap<Split, Vec<InstructionPair>> = BTreeMap::new();
        for p in pairs {
            by_split.entry(p.split).or_default().push(p);
        }
        let train_pool = by_split.remove(&Split::Train).unwrap_or_default();
        let train = sample_k_shot(&train_pool, ft.k_shot, ft.seed, ft.stratify_labels).map_err(|e| match e {
            ExportError::NotEnoughPairs { .. } => CliError::config("finetune.k_shot", e.to_string()),
            other => CliError::failed("export", other),
        })?;
        let name = format!("k{}-s{}", ft.k_shot, ft.seed);
        let details = json!({
            "run": name,
            "variant": variant.to_string(),
            "train_pool": train_pool.len(),
            "train": train.len(),
            "valid": by_split.get(&Split::Valid).map_or(0, Vec::len),
            "test": by_split.get(&Split::Test).map_or(0, Vec::len),
            "skipped": build.skipped,
            "over_length": build.over_length,
        });
        if self.dry_run {
            return Ok(self.summary("export", None, vec![], details));
        }
        let stage = StageDir::begin(&self.root, "export", true).map_err(self.io("export"))?;
        let dir = stage.path().join(&name);
        let mut files = vec![(Split::Train, train)];
        files.extend(by_split);
        for (split, pairs) in files {
            if pairs.is_empty() {
                log::warn!("export: no {split} pairs, file not written");
                continue;
            }
            let mut meta = ExportMeta::new(split, &variant, pairs.len());
            if split == Split::Train {
                meta.k_shot = Some(ft.k_shot);
                meta.seed = Some(ft.seed);
                meta.stratified = ft.stratify_labels;
            }
            export_jsonl(&pairs, &meta, &dir.join(format!("{split}.jsonl"))).map_err(|e| CliError::failed("export", e))?;
        }
        write_atomic(&dir.join("report.json"), &json_bytes(&details)).map_err(self.io("export"))?;
        let out = stage.commit(&self.cfg.echo()).map_err(self.io("export"))?;
        Ok(self.summary("export", None, vec![out.join(&name)], details))
    }

    /// Stages a prediction template depends on, plus `extra`.
    fn stages_needed(&self, variant: &TemplateId, extra: &[&'static str]) -> Result<Vec<&'static str>, CliError> {
        let mut need = extra.to_vec();
        let err = |e| CliError::config("eval.variant", format!("{e}"));
        if self.registry.uses_descriptions(variant).map_err(err)? {
            need.push("descriptions");
        }
        if self.registry.uses_profile(variant).map_err(err)? {
            need.push("profiles");
        }
        Ok(need)
    }

    pub fn eval(&self) -> Result<RunSummary, CliError> {
        let corpus = self.load_corpus()?;
        let variant = self
            .cfg
            .prediction_template(&self.cfg.eval.variant, "eval.variant", &self.registry)?;
        let task = self.cfg.eval.task;
        let examples: Vec<SplitExample> = self
            .load_examples(&corpus)?
            .into_iter()
            .filter(|e| self.cfg.eval.splits.contains(&e.split))
            .collect();
        let need = self.stages_needed(&variant, &[])?;
        let view = self.view(&corpus, &need)?;
        let prompter = self.prompter();
        let gateway = self.gateway();
        let name = format!("{}-{}-{}", variant.family, variant.variant, task);
        if self.dry_run {
            let bundles = examples
                .iter()
                .map(|ex| view.prediction_bundle(&prompter, &variant, task, ex))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::failed("eval", e))?;
            let pending = bundles.iter().filter(|b| !gateway.is_cached(&b.cache_key)).count();
            let details = json!({
                "run": name,
                "examples": examples.len(),
                "estimated_backend_calls": pending,
                "similarity": self.cfg.eval.similarity,
            });
            return Ok(self.summary("eval", Some(&gateway), vec![], details));
        }
        let opts = EvalOptions {
            workers: self.cfg.llm.concurrency,
            similarity: self.cfg.eval.similarity,
            resume_dir: Some(self.root.join("state").join(format!("eval-{name}"))),
            chunk: self.cfg.eval.chunk,
        };
        let run = run_eval(&examples, &view, &prompter, &variant, task, &gateway, &opts)
            .map_err(|e: HarnessError| CliError::failed("eval", e))?;
        let k_shot = (task == TaskKind::FinetunedPredict).then_some(self.cfg.finetune.k_shot);
        let seed = (task == TaskKind::FinetunedPredict).then_some(self.cfg.finetune.seed);
        let row = summarize(&run.records, &variant.to_string(), k_shot, seed).map_err(|e| CliError::failed("eval", e))?;
        let details = json!({
            "run": name,
            "records": run.records.len(),
            "parse": parse_counts(&run.records),
            "similarity_gaps": run.similarity_gaps,
            "summary": row,
        });
        let stage = StageDir::begin(&self.root, "eval", true).map_err(self.io("eval"))?;
        let dir = stage.path().join(&name);
        write_records(&run.records, &dir.join("records.jsonl")).map_err(self.io("eval"))?;
        write_atomic(&dir.join("summary.json"), &json_bytes(&details)).map_err(self.io("eval"))?;
        let out = stage.commit(&self.cfg.echo()).map_err(self.io("eval"))?;
        Ok(self.summary("eval", Some(&gateway), vec![out.join(&name)], details))
    }

    pub fn report(&self) -> Result<RunSummary, CliError> {
        let eval_dir = self.require("eval", "")?;
        let mut runs: Vec<PathBuf> = std::fs::read_dir(&eval_dir)
            .map_err(self.io("report"))?
            .filter_map(|e| e.ok().map(|e| e.path().join("records.jsonl")))
            .filter(|p| p.is_file())
            .collect();
        runs.sort();
        if runs.is_empty() {
            return Err(CliError::MissingUpstream {
                stage: "eval".into(),
                path: eval_dir.join("*/records.jsonl"),
            });
        }
        let mut records = Vec::new();
        for path in &runs {
            records.extend(read_records(path).map_err(|e| CliError::failed("report", format!("{}: {e}", path.display())))?);
        }
        let finetuned = records.iter().any(|r| r.task == TaskKind::FinetunedPredict);
        let k_shot = finetuned.then_some(self.cfg.finetune.k_shot);
        let seed = finetuned.then_some(self.cfg.finetune.seed);
        let report = aggregate_report(&records, k_shot, seed).map_err(|e| CliError::failed("report", e))?;
        let details = serde_json::to_value(&report).expect("report serializes");
        if self.dry_run {
            return Ok(self.summary("report", None, vec![], json!({ "runs": runs.len(), "records": records.len() })));
        }
        let stage = StageDir::begin(&self.root, "report", false).map_err(self.io("report"))?;
        report.write(stage.path()).map_err(self.io("report"))?;
        let out = stage.commit(&self.cfg.echo()).map_err(self.io("report"))?;
        Ok(self.summary("report", None, vec![out], details))
    }

    pub fn synth(&self, out: &Path, users: usize, items: usize, seed: Option<u64>) -> Result<RunSummary, CliError> {
        if users == 0 || items == 0 {
            return Err(CliError::config("synth", "--users and --items must be positive"));
        }
        let defaults = SyntheticSpec::default();
        let spec = SyntheticSpec {
            users,
            items,
            seed: seed.unwrap_or(defaults.seed),
            ..defaults
        };
        let details = json!({ "users": users, "items": items, "seed": spec.seed });
        if self.dry_run {
            return Ok(self.summary("synth", None, vec![], details));
        }
        let (r, m) = generate(&spec).write_to(out).map_err(self.io("synth"))?;
        Ok(self.summary("synth", None, vec![r, m], details))
    }
}
