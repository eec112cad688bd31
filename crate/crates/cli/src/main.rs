mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Settings;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "bevplace",
    version,
    about = "Rotation-invariant LiDAR place recognition and localization"
)]
struct Cli {
    /// TOML file with default values for any flag
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    settings: Settings,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic database (and optional query) dataset
    Synth,
    /// Train the network with the lazy triplet loss
    Train,
    /// Describe every database frame and fit per-frame mappings
    BuildDb,
    /// Rank database frames for a single scan
    Query,
    /// Recall@1 and Recall@1% over a query set
    EvalRecall,
    /// Precision-recall curve over a query set
    EvalPr,
    /// Refit per-frame mappings from an existing database
    FitMapping,
    /// Estimate query positions by trilateration
    Localize,
    /// Localize and report absolute translation error
    EvalAte,
}

fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    let s = cli.settings.over(file);
    match cli.command {
        Command::Synth => commands::synth(&s),
        Command::Train => commands::train(&s),
        Command::BuildDb => commands::build_db(&s),
        Command::Query => commands::query(&s),
        Command::EvalRecall => commands::eval_recall(&s),
        Command::EvalPr => commands::eval_pr(&s),
        Command::FitMapping => commands::fit_mapping(&s),
        Command::Localize => commands::localize_cmd(&s),
        Command::EvalAte => commands::eval_ate(&s),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
