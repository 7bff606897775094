//! Command-line driver: argument parsing, layered run configuration and the
//! `gen-synth | pretrain | finetune | evaluate | analyze | report` pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use error::{CliError, CliResult, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "ideolens", version, about = "Multimodal ideology classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration value; bare keys belong to the subcommand's section.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus with PNG images.
    GenSynth(Common),
    /// Pretrain encoders with one objective or a comma-separated sequence.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// e.g. `infonce,triplet`.
        #[arg(long, value_name = "LIST")]
        objective: Option<String>,
    },
    /// Train the classifier with early stopping and score the held-out split.
    Finetune(Common),
    /// Score a checkpoint on a labelled corpus.
    Evaluate(Common),
    /// Tabulate image annotations by ideology.
    Analyze(Common),
    /// Combine metrics files into one results table.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::GenSynth(c) | Self::Finetune(c) | Self::Evaluate(c) | Self::Analyze(c) | Self::Report(c) => c,
            Self::Pretrain { common, .. } => common,
        }
    }

    /// Section that bare `--set` keys refer to.
    fn section(&self) -> &'static str {
        match self {
            Self::GenSynth(_) => "synthetic",
            Self::Pretrain { .. } | Self::Finetune(_) => "train",
            Self::Evaluate(_) => "data",
            Self::Analyze(_) => "analysis",
            Self::Report(_) => "report",
        }
    }
}

fn execute(command: &Command) -> CliResult<()> {
    let common = command.common();
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.set, common.seed, command.section())?;
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    match command {
        Command::GenSynth(_) => commands::gen_synth(&cfg),
        Command::Pretrain { objective, .. } => commands::pretrain(&cfg, objective.as_deref()),
        Command::Finetune(_) => commands::finetune(&cfg),
        Command::Evaluate(_) => commands::evaluate(&cfg),
        Command::Analyze(_) => commands::analyze(&cfg),
        Command::Report(_) => commands::report(&cfg),
    }
}

/// Runs the CLI and returns the process exit status. Failures print their
/// reason as the last stderr line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            eprint!("{rendered}");
            let summary = rendered.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(summary.to_string()).reason_line());
            return EXIT_USAGE;
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.reason_line());
            e.exit_code()
        }
    }
}
