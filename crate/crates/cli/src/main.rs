//! `riqa` command-line tool: synthesize ranked corpora, train the ranking
//! branch, fine-tune on quality labels, evaluate, and benchmark the
//! single-pass gradient against the pairwise baseline.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::AppConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "riqa", version, about = "Learning image quality from ranked distortions")]
struct Cli {
    /// Configuration file (TOML). Built-in desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the ranked distortion corpus and its manifests
    Generate,
    /// Phase-1 ranking training on the generated corpus
    TrainRank {
        /// efficient (single-pass all-pairs) or randompair (baseline)
        #[arg(long)]
        strategy: Option<String>,
        /// Continue a checkpointed run bit-identically
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Phase-2 regression fine-tuning from a ranking checkpoint
    Finetune,
    /// Evaluate a checkpoint: LCC/SROCC report and level histograms
    Eval,
    /// Forward-pass accounting and gradient-equality benchmark
    Bench,
    /// Finite-difference check of ranking and fine-tuning gradients
    Gradcheck,
}

/// User/config problems exit 2, internal failures exit 1.
pub enum CliError {
    User(String),
    Internal(anyhow::Error),
}

impl From<riqa_core::Error> for CliError {
    fn from(e: riqa_core::Error) -> CliError {
        use riqa_core::Error as E;
        match e {
            E::Config(_) | E::MissingFiles(_) | E::Format { .. } | E::Io { .. } => {
                CliError::User(e.to_string())
            }
            other => CliError::Internal(anyhow::Error::new(other)),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let mut cfg = match AppConfig::load(cli.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
        Err(CliError::Internal(e)) => {
            eprintln!("internal error: {e:?}");
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }

    let result = match &cli.command {
        Command::Generate => commands::generate(&cfg, cli.config.as_deref()),
        Command::TrainRank { strategy, resume } => {
            commands::train_rank(&cfg, cli.config.as_deref(), strategy.as_deref(), resume.as_deref())
        }
        Command::Finetune => commands::finetune(&cfg, cli.config.as_deref()),
        Command::Eval => commands::eval(&cfg, cli.config.as_deref()),
        Command::Bench => commands::bench(&cfg, cli.config.as_deref()),
        Command::Gradcheck => commands::gradcheck(&cfg, cli.config.as_deref()),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(1)
        }
    }
}
