//! `clinical-mtl`: generate synthetic corpora, train, evaluate, predict and
//! inspect.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use clinical_mtl::eval::ReCondition;

use config::RunConfig;
use error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "clinical-mtl",
    version,
    about = "Joint clinical entity and relation extraction"
)]
struct Cli {
    /// Run config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Corpus directory, or a text file for `predict`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model checkpoint to load (or to resume training from).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus in i2b2 format.
    Generate {
        /// Number of documents (overrides `corpus.documents`).
        #[arg(short = 'n', long)]
        documents: Option<usize>,
    },
    /// Train on a corpus directory; writes checkpoint, history and config.
    Train,
    /// Score a checkpoint on a corpus directory.
    Evaluate {
        #[arg(long, value_enum)]
        condition: Option<Condition>,
    },
    /// Annotate a newline-delimited text file.
    Predict,
    /// Summarize a corpus directory and/or checkpoint.
    Inspect,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Condition {
    Gold,
    #[value(name = "end2end")]
    EndToEnd,
}

impl From<Condition> for ReCondition {
    fn from(c: Condition) -> Self {
        match c {
            Condition::Gold => ReCondition::GoldEntities,
            Condition::EndToEnd => ReCondition::EndToEnd,
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if cli.data.is_some() {
        cfg.paths.data.clone_from(&cli.data);
    }
    if cli.out.is_some() {
        cfg.paths.out.clone_from(&cli.out);
    }
    if cli.checkpoint.is_some() {
        cfg.paths.checkpoint.clone_from(&cli.checkpoint);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Generate { documents } => {
            if let Some(n) = documents {
                cfg.corpus.documents = n;
            }
            commands::generate(&cfg)
        }
        Command::Train => commands::train(&cfg),
        Command::Evaluate { condition } => commands::evaluate_cmd(&cfg, condition.map(Into::into)),
        Command::Predict => commands::predict(&cfg),
        Command::Inspect => commands::inspect(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
