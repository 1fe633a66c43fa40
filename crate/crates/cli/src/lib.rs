//! Command surface of the `blindrec` binary.
//!
//! Each command reads the run configuration, works inside one output
//! directory and records its inputs and results in `run_manifest.json`.
//! Exit codes: 0 ok, 2 transport, 3 overwrite refusal, 4 missing
//! prerequisite, 5 validation, 1 anything else.

pub mod commands;
pub mod config;
pub mod error;
pub mod layout;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::{BackendKind, EmbeddingKind, RunConfig};
pub use error::{CliError, CliResult};
pub use layout::Layout;
pub use manifest::{MetricRow, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "blindrec", version, about = "Fair recommendation without observed sensitive attributes")]
pub struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides the configuration).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Completion backend (overrides the configuration).
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Output directory of the run.
    #[arg(long, global = true, default_value = "blindrec-out")]
    pub out: PathBuf,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate annotator personas and embed their descriptions.
    Personas {
        /// Number of personas (overrides `agents.annotators`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Ask every persona to infer every user's attribute (resumable).
    Annotate,
    /// Fuse each user's annotations into one rationale (resumable).
    Summarize,
    /// Train one stage, or all of them in order.
    Train {
        #[arg(value_enum)]
        stage: TrainStage,
    },
    /// Ranking, leakage and group-fairness metrics plus label quality.
    Evaluate {
        /// Evaluate only this user table; `user` is the unfair baseline.
        #[arg(long, value_enum)]
        embedding: Option<EmbeddingKind>,
    },
    /// personas, annotate, summarize, train all and evaluate in sequence.
    Pipeline,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainStage {
    Pretrain,
    Stage1,
    Stage2,
    All,
}

/// Configuration after applying command-line overrides.
pub fn effective_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(b) = cli.backend {
        cfg.agents.backend = b;
    }
    if let Command::Personas { n: Some(n) } = cli.command {
        cfg.agents.annotators = n;
    }
    if let Command::Evaluate { embedding: Some(e) } = cli.command {
        cfg.eval.embeddings = vec![e];
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = effective_config(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mut session = commands::Session::open(cfg, Layout::new(&cli.out), cli.force)?;
    match cli.command {
        Command::Personas { .. } => session.record("personas", |s| s.personas()),
        Command::Annotate => session.record("annotate", |s| s.annotate()),
        Command::Summarize => session.record("summarize", |s| s.summarize()),
        Command::Train { stage } => session.record("train", |s| s.train(stage)),
        Command::Evaluate { .. } => session.record("evaluate", |s| s.evaluate().map(|_| ())),
        Command::Pipeline => session.record("pipeline", |s| s.pipeline()),
        Command::ShowConfig => unreachable!("handled above"),
    }
}
