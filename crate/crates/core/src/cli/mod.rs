//! `pipeline` command line: one subcommand per stage, each reading its inputs
//! from and writing its outputs to `{output_root}/{stage}/`.

mod config;
mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

pub use config::{
    BackendKind, DatasetConfig, EvalConfig, FinetuneConfig, LlmConfig, PipelineConfig, RunConfig, ENV_API_KEY,
    ENV_BASE_URL, ENV_EMB_BASE_URL, ENV_EMB_MODEL, ENV_MODEL,
};
pub use stages::StageDir;

use crate::corpus::DatasetKind;
use crate::gateway::TaskKind;
use crate::splitter::Split;

#[derive(Debug, Clone, Parser)]
#[command(name = "pipeline", version, about = "Recommendation reasoning pipeline")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Overrides both the review-sampling and the K-shot seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print what would be done and write nothing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Parse the raw dataset into the canonical corpus.
    Ingest(IngestArgs),
    /// Keep users with at least k interactions.
    Kcore {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Leave-one-out train/valid/test targets with recent histories.
    Split {
        #[arg(long)]
        history_k: Option<usize>,
    },
    /// Generate item descriptions, user profiles or reasoning.
    Gen {
        #[arg(value_enum)]
        what: GenTarget,
    },
    /// Instruction-tuning files: K-shot train plus full valid and test.
    Export {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        stratify_labels: bool,
    },
    /// Prediction run over the configured splits.
    Eval {
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        #[arg(long, value_delimiter = ',')]
        splits: Option<Vec<Split>>,
        #[arg(long)]
        no_similarity: bool,
    },
    /// Aggregate every eval run into report.json and report.csv.
    Report,
    /// Write a seeded synthetic product dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        users: usize,
        #[arg(long, default_value_t = 120)]
        items: usize,
    },
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub kind: Option<DatasetKind>,
    #[arg(long)]
    pub reviews: Option<PathBuf>,
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long)]
    pub ratings: Option<PathBuf>,
    #[arg(long)]
    pub movies: Option<PathBuf>,
    #[arg(long)]
    pub plots: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenTarget {
    Descriptions,
    Profiles,
    Reasoning,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    match s {
        "zero_shot_predict" | "zero-shot" => Ok(TaskKind::ZeroShotPredict),
        "finetuned_predict" | "finetuned" => Ok(TaskKind::FinetunedPredict),
        other => Err(format!("unknown prediction task {other:?}")),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config field {field}: {message}")]
    Config { field: String, message: String },
    #[error("missing output of stage {stage} ({}); run `pipeline {stage}` first", path.display())]
    MissingUpstream { stage: String, path: PathBuf },
    #[error("{stage}: {message}")]
    Failed { stage: String, message: String },
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn failed(stage: &str, e: impl std::fmt::Display) -> Self {
        CliError::Failed {
            stage: stage.into(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::MissingUpstream { .. } => 3,
            CliError::Failed { .. } => 1,
        }
    }

    /// One-line JSON form printed on stderr.
    pub fn to_json(&self) -> Value {
        let mut v = json!({ "error": self.to_string(), "exit_code": self.exit_code() });
        match self {
            CliError::Config { field, .. } => v["field"] = json!(field),
            CliError::MissingUpstream { stage, path } => {
                v["stage"] = json!(stage);
                v["path"] = json!(path);
            }
            CliError::Failed { stage, .. } => v["stage"] = json!(stage),
        }
        v
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub dry_run: bool,
    pub backend_calls: usize,
    pub outputs: Vec<PathBuf>,
    pub details: Value,
}

/// Resolves the configuration for `cli`: defaults, file, environment, flags.
pub fn resolve_config(cli: &Cli, env: impl Fn(&str) -> Option<String>) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(env);
    if let Some(root) = &cli.output_root {
        cfg.pipeline.output_root = root.clone();
    }
    if let Some(b) = cli.backend {
        cfg.llm.backend = b;
    }
    if let Some(s) = cli.seed {
        cfg.pipeline.seed = s;
        cfg.finetune.seed = s;
    }
    match &cli.command {
        Command::Ingest(a) => {
            let d = &mut cfg.dataset;
            if let Some(k) = a.kind {
                d.kind = k;
            }
            for (slot, flag) in [
                (&mut d.reviews, &a.reviews),
                (&mut d.metadata, &a.metadata),
                (&mut d.ratings, &a.ratings),
                (&mut d.movies, &a.movies),
                (&mut d.plots, &a.plots),
            ] {
                if flag.is_some() {
                    slot.clone_from(flag);
                }
            }
            if let Some(t) = a.threshold {
                d.threshold = t;
            }
        }
        Command::Kcore { k: Some(k) } => cfg.pipeline.k_core = Some(*k),
        Command::Split { history_k: Some(k) } => cfg.pipeline.history_k = Some(*k),
        Command::Export {
            k,
            variant,
            stratify_labels,
        } => {
            if let Some(k) = k {
                cfg.finetune.k_shot = *k;
            }
            if let Some(v) = variant {
                cfg.finetune.variant.clone_from(v);
            }
            cfg.finetune.stratify_labels |= *stratify_labels;
        }
        Command::Eval {
            variant,
            task,
            splits,
            no_similarity,
        } => {
            if let Some(v) = variant {
                cfg.eval.variant.clone_from(v);
            }
            if let Some(t) = task {
                cfg.eval.task = *t;
            }
            if let Some(s) = splits {
                cfg.eval.splits.clone_from(s);
            }
            if *no_similarity {
                cfg.eval.similarity = false;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

/// Runs one command in-process.
pub fn run(cli: &Cli) -> Result<RunSummary, CliError> {
    let cfg = resolve_config(cli, |k| std::env::var(k).ok())?;
    run_with_config(cli, cfg)
}

pub fn run_with_config(cli: &Cli, cfg: RunConfig) -> Result<RunSummary, CliError> {
    let ctx = stages::Context::new(cfg, cli.dry_run)?;
    match &cli.command {
        Command::Ingest(_) => ctx.ingest(),
        Command::Kcore { .. } => ctx.kcore(),
        Command::Split { .. } => ctx.split(),
        Command::Gen { what } => ctx.generate(*what),
        Command::Export { .. } => ctx.export(),
        Command::Eval { .. } => ctx.eval(),
        Command::Report => ctx.report(),
        Command::Synth { out, users, items } => ctx.synth(out, *users, *items, cli.seed),
    }
}
