//! Helpers shared by the end-to-end and acceptance targets: run the pipeline
//! in-process against a directory and inspect what it wrote.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Parser;
use recreason::cli::{resolve_config, run_with_config, BackendKind, Cli, CliError, RunSummary};
use recreason::context::ArtifactView;
use recreason::corpus::{read_canonical, Corpus};
use recreason::export::{import_jsonl, ExportMeta, InstructionPair};
use recreason::gateway::TaskKind;
use recreason::generation::ArtifactStore;
use recreason::prompting::{Family, Prompter, Registry};
use recreason::splitter::{load_examples, SplitExample};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/synthetic")
}

/// Runs one `pipeline` invocation in-process with the mock backend and no
/// environment overrides.
pub fn run(root: &Path, args: &[&str]) -> Result<RunSummary, CliError> {
    let root = root.to_str().expect("utf-8 root");
    let argv = ["pipeline", "--output-root", root, "--backend", "mock"]
        .into_iter()
        .chain(args.iter().copied());
    let cli = Cli::try_parse_from(argv).expect("valid arguments");
    let cfg = resolve_config(&cli, |_| None)?;
    assert_eq!(cfg.llm.backend, BackendKind::Mock);
    run_with_config(&cli, cfg)
}

/// Outcome of each stage of a full run, in order.
pub struct PipelineRun {
    pub stages: Vec<(String, Result<RunSummary, CliError>)>,
}

impl PipelineRun {
    pub fn backend_calls(&self) -> usize {
        self.stages
            .iter()
            .filter_map(|(_, r)| r.as_ref().ok())
            .map(|s| s.backend_calls)
            .sum()
    }

    pub fn get(&self, name: &str) -> &Result<RunSummary, CliError> {
        &self.stages.iter().find(|(n, _)| n == name).expect("stage ran").1
    }

    pub fn failures(&self) -> Vec<String> {
        self.stages
            .iter()
            .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
            .collect()
    }
}

/// ingest through report over the product dump in `data`. Every stage runs
/// even if an earlier one failed, so later checks can still look at the rest.
pub fn full_pipeline(root: &Path, data: &Path, k_shot: usize) -> PipelineRun {
    let reviews = data.join("reviews.jsonl");
    let meta = data.join("meta.jsonl");
    let k = k_shot.to_string();
    let steps: Vec<(&str, Vec<&str>)> = vec![
        (
            "ingest",
            vec![
                "ingest",
                "--kind",
                "products",
                "--reviews",
                reviews.to_str().unwrap(),
                "--metadata",
                meta.to_str().unwrap(),
            ],
        ),
        ("kcore", vec!["kcore"]),
        ("split", vec!["split"]),
        ("descriptions", vec!["gen", "descriptions"]),
        ("profiles", vec!["gen", "profiles"]),
        ("reasoning", vec!["gen", "reasoning"]),
        ("export", vec!["export", "--k", &k]),
        ("eval-v1", vec!["eval", "--variant", "v1"]),
        ("eval-vanilla", vec!["eval", "--variant", "vanilla"]),
        ("report", vec!["report"]),
    ];
    let stages = steps
        .into_iter()
        .map(|(name, args)| (name.to_string(), run(root, &args)))
        .collect();
    PipelineRun { stages }
}

/// Every file under `root` except the response cache and resume state,
/// keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            if rel.starts_with("cache") || rel.starts_with("state") {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}

pub fn export_dirs(root: &Path) -> Vec<PathBuf> {
    let Ok(rd) = std::fs::read_dir(root.join("export")) else {
        return Vec::new();
    };
    let mut dirs: Vec<PathBuf> = rd.map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    dirs
}

pub fn read_export(dir: &Path, split: &str) -> (ExportMeta, Vec<InstructionPair>) {
    import_jsonl(&dir.join(format!("{split}.jsonl"))).expect("export file parses")
}

pub fn load_corpus(root: &Path) -> Corpus {
    read_canonical(&root.join("kcore/corpus.jsonl")).expect("kcore corpus")
}

pub fn load_split(root: &Path, corpus: &Corpus) -> Vec<SplitExample> {
    load_examples(&root.join("split/manifest.jsonl"), corpus).expect("split manifest")
}

/// Re-renders every prediction prompt the run could have issued: each split
/// example under each prediction template for the corpus's dataset kind,
/// using the generated descriptions and profiles on disk.
pub fn prediction_prompts(root: &Path, registry: &Registry) -> Vec<(String, String)> {
    let corpus = load_corpus(root);
    let examples = load_split(root, &corpus);
    let prompter = Prompter::new(registry, corpus.dataset_kind, "mock");
    let descriptions = ArtifactStore::open(root.join("descriptions")).unwrap();
    let profiles = ArtifactStore::open(root.join("profiles")).unwrap();
    let view = ArtifactView::new(&corpus)
        .load_descriptions(&descriptions, &prompter.template_id(Family::ItemDescription))
        .unwrap()
        .load_profiles(&profiles, &prompter.template_id(Family::UserProfile))
        .unwrap();
    let mut out = Vec::new();
    for id in registry.ids() {
        if !id.family.is_prediction() || id.dataset_kind != corpus.dataset_kind {
            continue;
        }
        for task in [TaskKind::ZeroShotPredict, TaskKind::FinetunedPredict] {
            for ex in &examples {
                let bundle = view.prediction_bundle(&prompter, id, task, ex).expect("prediction prompt renders");
                out.push((format!("{id}/{}/{}", ex.user_id, ex.split.as_str()), bundle.rendered));
            }
        }
    }
    out
}

/// Reasoning prompts for every split example; these are the ones that are
/// supposed to carry the label.
pub fn reasoning_prompts(root: &Path, registry: &Registry) -> Vec<String> {
    let corpus = load_corpus(root);
    let examples = load_split(root, &corpus);
    let prompter = Prompter::new(registry, corpus.dataset_kind, "mock");
    let view = ArtifactView::new(&corpus);
    examples
        .iter()
        .map(|ex| view.reasoning_bundle(&prompter, ex).expect("reasoning prompt renders").rendered)
        .collect()
}

/// Instruction pairs for every split example that has reasoning, built the
/// same way the export stage builds them, for each prediction template of the
/// corpus's dataset kind.
pub fn all_pairs(root: &Path, registry: &Registry) -> Vec<InstructionPair> {
    let corpus = load_corpus(root);
    let examples = load_split(root, &corpus);
    let prompter = Prompter::new(registry, corpus.dataset_kind, "mock");
    let open = |stage: &str| ArtifactStore::open(root.join(stage)).unwrap();
    let view = ArtifactView::new(&corpus)
        .load_descriptions(&open("descriptions"), &prompter.template_id(Family::ItemDescription))
        .unwrap()
        .load_profiles(&open("profiles"), &prompter.template_id(Family::UserProfile))
        .unwrap()
        .load_reasoning(&open("reasoning"), &prompter.template_id(Family::ReasoningGt))
        .unwrap();
    let mut out = Vec::new();
    for id in registry.ids() {
        if id.family == Family::ReasoningRec && id.dataset_kind == corpus.dataset_kind {
            let (pairs, _) = recreason::export::build_pairs(&examples, &view, &prompter, id).expect("pairs build");
            out.extend(pairs);
        }
    }
    out
}
