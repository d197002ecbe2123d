//! `collapse`: build a Gaussian patch model, learn selection masks, rank
//! patches, and evaluate orderings.
//!
//! Exit status: 0 on success, 1 on invalid input, 2 on numerical failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(
    name = "collapse",
    version,
    about = "Patch collapse experiments on Gaussian fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted config override, e.g. `train.lambda_c=0.1`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write the Gaussian model and a sample batch.
    BuildField,
    /// Train selection masks on the model.
    LearnMasks,
    /// Rank patches by power iteration, Neumann series and direct solve.
    Rank,
    /// Compare orderings and run the masked classification analogue.
    Evaluate,
    /// Run every stage in order.
    All,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = ExperimentConfig::load(
        cli.config.as_deref(),
        &cli.overrides,
        cli.seed,
        cli.out.as_deref(),
    )
    .and_then(|config| match cli.command {
        Command::BuildField => commands::build_field(&config),
        Command::LearnMasks => commands::learn_masks(&config),
        Command::Rank => commands::rank(&config),
        Command::Evaluate => commands::evaluate(&config),
        Command::All => commands::all(&config),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
