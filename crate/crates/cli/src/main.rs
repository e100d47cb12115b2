//! `memtree` command-line front end.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{Class, CliError};

#[derive(Debug, Parser)]
#[command(
    name = "memtree",
    version,
    about = "Schema-bounded persona memory for dialogue agents"
)]
pub struct Cli {
    /// TOML config file (also read from MEMTREE_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set recall.top_k=6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Store directory; shorthand for `--set store_path=...`.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct MockArgs {
    /// JSON map from chunk fingerprint to listener completion ("*" = fallback).
    #[arg(long, value_name = "SCRIPT")]
    pub mock_listener: Option<PathBuf>,
    /// Answer every question with this text instead of calling a model.
    #[arg(long, value_name = "TEXT")]
    pub mock_answer: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a store whose version 0 is the empty tree.
    Init {
        /// Schema document; defaults to the config's schema_path or the built-in schema.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Evolve the tree over a dialogue history (JSONL records or a USER:/ASSISTANT: transcript).
    Ingest {
        history: PathBuf,
        /// Number chunks after the last committed chunk instead of from 1.
        #[arg(long)]
        append: bool,
        #[arg(long, value_name = "SCRIPT")]
        mock_listener: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Print the tree outline at the head or a given version.
    Show {
        #[arg(long)]
        version: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Leaf changes between two versions.
    Diff {
        a: u64,
        b: u64,
        #[arg(long)]
        json: bool,
    },
    /// Answer one question from memory.
    Ask {
        question: String,
        #[arg(long, value_parser = ["fast", "agentic", "auto"])]
        mode: Option<String>,
        #[arg(long, value_name = "TEXT")]
        mock_answer: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Interactive session: answers each line and folds the dialogue into memory.
    Chat {
        #[command(flatten)]
        mocks: MockArgs,
    },
    /// Run a multiple-choice case file against the current memory.
    Eval {
        cases: PathBuf,
        #[arg(long, value_parser = ["fast", "agentic", "auto"])]
        mode: Option<String>,
        /// Answer each case with its key (upper-bound sanity check).
        #[arg(long, conflicts_with = "mock_answer")]
        mock_oracle: bool,
        #[arg(long, value_name = "TEXT")]
        mock_answer: Option<String>,
        /// Ingest this history before evaluating.
        #[arg(long, value_name = "HISTORY")]
        ingest: Option<PathBuf>,
        #[arg(long, value_name = "SCRIPT", requires = "ingest")]
        mock_listener: Option<PathBuf>,
        /// Also write per-case rows as CSV.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Rebuild a version by re-applying the logged operations.
    Replay {
        /// Check every snapshot digest and replay the whole log.
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value_t = 0)]
        from: u64,
        #[arg(long)]
        to: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MEMTREE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.to_string();
            let first = rendered
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            return report(CliError::new(Class::Usage, first));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("{e}");
    ExitCode::from(e.class.code())
}
