//! Command-line surface tying the framework together: corpus synthesis,
//! evolution runs, robustness evaluation, bank auditing, ablations and
//! training-data export.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments or config),
//! 2 runtime failure.

pub mod commands;
pub mod config;
pub mod prompts;

use clap::{Parser, Subcommand};
use commands::{BankAction, ExportKind};
use std::path::PathBuf;

#[derive(Debug)]
pub enum CliError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

#[derive(Parser, Debug)]
#[command(
    name = "seer",
    about = "Skill-evolving grounded-reasoning harness for free-text promptable segmentation",
    version
)]
pub struct Cli {
    /// Path to the run-configuration JSON document.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize the case corpus and request sets onto disk.
    Synth {
        /// Also export every rendered view as a PGM image per case.
        #[arg(long)]
        views: bool,
    },
    /// Run evolution rounds: retrieve, generate, execute, reward, distill.
    Evolve {
        /// Override the configured round count.
        #[arg(long)]
        rounds: Option<u64>,
        /// Validate the configuration and exit without writing anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate robustness under label and free-text prompting.
    Eval {
        /// Bank file to retrieve from (defaults to the configured initial bank).
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Report sample (N-1) standard deviations instead of population.
        #[arg(long)]
        sample_std: bool,
    },
    /// Inspect or rewrite a bank file.
    Bank {
        #[command(subcommand)]
        action: BankCommand,
    },
    /// Run the three-row ablation on identical seeds.
    Ablate,
    /// Export training data from a completed run.
    Export {
        #[command(subcommand)]
        kind: ExportCommand,
    },
    /// Sample episodes from a completed run for human review.
    Review {
        /// Fraction of episodes to sample.
        #[arg(long, default_value_t = 0.05)]
        fraction: f64,
        /// Run directory (defaults to the configured out_dir).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Output path (defaults to <run>/review_sample.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum BankCommand {
    /// Print size, per-tag counts and gain extremes.
    Inspect {
        #[arg(long)]
        bank: PathBuf,
    },
    /// Merge near-duplicate artifacts in place.
    Dedup {
        #[arg(long)]
        bank: PathBuf,
    },
    /// Remove well-observed artifacts with marginal gain below a floor.
    Cull {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value_t = 10)]
        min_uses: u64,
        #[arg(long, default_value_t = 0.0)]
        min_gain: f64,
    },
    /// Dump the full marginal-gain table.
    Gains {
        #[arg(long)]
        bank: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum ExportCommand {
    /// (prompt, completion) pairs from episodes above a reward threshold.
    Sft {
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        /// Run directory (defaults to the configured out_dir).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Output path (defaults to <run>/export_sft.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-sample groups with rewards and group-relative advantages.
    Grpo {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = commands::resolve_config(cli.config.as_ref())?;
    match cli.command {
        Command::Synth { views } => commands::cmd_synth(&config, views),
        Command::Evolve { rounds, dry_run } => commands::cmd_evolve(&config, rounds, dry_run),
        Command::Eval { bank, sample_std } => {
            commands::cmd_eval(&config, bank.as_deref(), sample_std)
        }
        Command::Bank { action } => match action {
            BankCommand::Inspect { bank } => commands::cmd_bank(BankAction::Inspect, &bank),
            BankCommand::Dedup { bank } => commands::cmd_bank(BankAction::Dedup, &bank),
            BankCommand::Cull {
                bank,
                min_uses,
                min_gain,
            } => commands::cmd_bank(BankAction::Cull { min_uses, min_gain }, &bank),
            BankCommand::Gains { bank } => commands::cmd_bank(BankAction::Gains, &bank),
        },
        Command::Ablate => commands::cmd_ablate(&config),
        Command::Export { kind } => match kind {
            ExportCommand::Sft {
                threshold,
                run,
                out,
            } => commands::cmd_export(
                &config,
                ExportKind::Sft { threshold },
                run.as_deref(),
                out.as_deref(),
            ),
            ExportCommand::Grpo { run, out } => {
                commands::cmd_export(&config, ExportKind::Grpo, run.as_deref(), out.as_deref())
            }
        },
        Command::Review { fraction, run, out } => {
            commands::cmd_review(&config, fraction, run.as_deref(), out.as_deref())
        }
    }
}
