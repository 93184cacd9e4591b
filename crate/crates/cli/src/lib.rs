//! Command-line front end for the `finesent` pipeline: corpus preparation,
//! vocab building, pretraining, fine-tuning, evaluation and prediction.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use finesent::{Scope, Task};

use crate::commands::Context;
use crate::config::{Overrides, RunConfig};
pub use crate::error::{exit, CliError};

#[derive(Debug, Parser)]
#[command(
    name = "finesent",
    version,
    about = "Fine-grained sentiment classification with a small BERT-style encoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Comma-separated list of scopes.
#[derive(Debug, Clone)]
pub struct ScopeList(pub Vec<Scope>);

impl FromStr for ScopeList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        config::scope_list(s).map(ScopeList)
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_parser = ["base", "large", "toy"])]
    pub preset: Option<String>,
    /// sst2 or sst5.
    #[arg(long)]
    pub task: Option<Task>,
    /// Evaluation scopes, e.g. `all,root`.
    #[arg(long)]
    pub scope: Option<ScopeList>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the treebank, export sentences and write corpus statistics.
    Prepare(Common),
    /// Build a WordPiece vocab from the training sentences.
    Vocab(Common),
    /// Pretrain the encoder with masked-word and next-sentence objectives.
    Pretrain(Common),
    /// Fine-tune a classifier on the treebank.
    Finetune(Common),
    /// Score a classifier on the configured split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Classifier checkpoint (defaults to the configured one).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Classify one text.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        text: String,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prepare(c)
            | Command::Vocab(c)
            | Command::Pretrain(c)
            | Command::Finetune(c) => c,
            Command::Eval { common, .. } | Command::Predict { common, .. } => common,
        }
    }
}

/// Runs a parsed command and returns its stdout text.
pub fn execute(cli: &Cli, argv: Vec<String>) -> Result<String, CliError> {
    let common = cli.command.common();
    let overrides = Overrides {
        seed: common.seed,
        preset: common.preset.clone(),
        task: common.task,
        scopes: common.scope.clone().map(|s| s.0),
    };
    let ctx = Context {
        config: RunConfig::load(&common.config, &overrides)?,
        force: common.force,
        argv,
    };
    match &cli.command {
        Command::Prepare(_) => commands::prepare(&ctx),
        Command::Vocab(_) => commands::vocab(&ctx),
        Command::Pretrain(_) => commands::pretrain_cmd(&ctx),
        Command::Finetune(_) => commands::finetune_cmd(&ctx),
        Command::Eval { checkpoint, .. } => commands::eval_cmd(&ctx, checkpoint.as_deref()),
        Command::Predict {
            checkpoint, text, ..
        } => commands::predict_cmd(&ctx, checkpoint.as_deref(), text),
    }
}

/// Parses `args` (program name first), runs, prints, and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::SUCCESS
            };
            let _ = e.print();
            return code;
        }
    };
    let argv = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(&cli, argv) {
        Ok(out) => {
            print!("{out}");
            exit::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
