//! `webctx` command-line tool.
//!
//! Exit codes: 0 success, 1 invalid input (usage, configs, data files,
//! unknown ids), 2 failure while running.

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "webctx",
    version,
    about = "Context-aware price, title and image detection on webpages"
)]
pub struct Cli {
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config file (TOML). `train` reads a TrainConfig, `synth` a SynthSpec.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset and report its pages, leaves and labels.
    Ingest(IngestArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Export the context graph of one page.
    BuildGraph(GraphArgs),
    /// Train one model per cross-domain fold.
    Train(TrainArgs),
    /// Score fold checkpoints on their held-out domains.
    Eval(EvalArgs),
    /// Predict price, title and image of pages.
    Predict(PredictArgs),
    /// Draw the attention of one element over its context.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Label manifest CSV; defaults to labels.csv next to the manifest when present.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Also export heuristic feature matrices (one CSV per page plus columns.json) here.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// SynthSpec TOML; `--config` is used when absent, defaults otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub page: String,
    /// Context size.
    #[arg(long, default_value_t = 24)]
    pub k: usize,
    /// preorder or tree_path.
    #[arg(long, default_value = "preorder")]
    pub metric: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for checkpoints, folds.json, train_log.jsonl and stamp.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Fold definitions JSON; computed from the manifest when absent.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Number of domain folds when computing them.
    #[arg(long, default_value_t = 5)]
    pub n_folds: usize,
    /// Train only this fold.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Context size; overrides the config file.
    #[arg(long)]
    pub k: Option<usize>,
    /// Epoch cap; overrides the config file.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Adam learning rate; overrides the config file.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Keep the backbone at its initial weights and cache its RoI features.
    #[arg(long)]
    pub freeze_backbone: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// A training output directory, or one fold checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Fold definitions; defaults to folds.json next to the checkpoints.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Fold of a single checkpoint file; read from a `fold_<f>` file name otherwise.
    #[arg(long)]
    pub fold: Option<usize>,
    #[command(flatten)]
    pub graph: GraphOverride,
    #[arg(long)]
    pub out: PathBuf,
}

/// Context size and metric at inference; default to the training stamp next to the checkpoint.
#[derive(Debug, Args)]
pub struct GraphOverride {
    /// Context size.
    #[arg(long)]
    pub k: Option<usize>,
    /// Graph metric: preorder or tree_path.
    #[arg(long)]
    pub metric: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Predict only this page.
    #[arg(long)]
    pub page: Option<String>,
    #[command(flatten)]
    pub graph: GraphOverride,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub page: String,
    #[arg(long)]
    pub element: u32,
    /// Attention above which a neighbor is shaded.
    #[arg(long, default_value_t = webctx::viz::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[command(flatten)]
    pub graph: GraphOverride,
    /// Overlay PNG; the score report goes next to it with a `.json` extension.
    #[arg(long)]
    pub out: PathBuf,
}

/// An input problem detected by the CLI itself.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(input) = webctx::classify(cause) {
            return if input { 1 } else { 2 };
        }
    }
    2
}

pub fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
