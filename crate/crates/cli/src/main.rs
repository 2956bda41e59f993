//! `clgt`: build weekly interaction graphs from course exports, train and
//! evaluate the grade model, explain its predictions and export
//! visualization data.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::VizKind;
use crate::config::{Overrides, RunConfig, SplitChoice};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "clgt", version, about = "Student interaction graphs and grade prediction")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for model init, data split, dropout and the explainer.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.max_epochs=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Weekly graphs, interaction matrices, node features and thresholds.
    BuildGraph,
    /// Train the model; writes checkpoint.json, history.csv, metrics.json.
    Train,
    /// Score a trained checkpoint; writes metrics.json.
    Evaluate {
        #[arg(long, value_enum)]
        split: Option<SplitChoice>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Perturbation explanation of one week; writes explanation.json and influence.dot.
    Explain {
        #[arg(long)]
        week: Option<u32>,
        /// Perturbation rounds.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Influence graph as DOT, or the student-by-week activity matrix as CSV.
    ExportViz {
        #[arg(value_enum)]
        what: VizKind,
        /// Explanation JSON for `influence`; defaults to <out>/explanation.json.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
    },
    /// Write a synthetic course (CSV exports plus clgt.toml) to the output directory.
    Synth,
    /// Print the resolved configuration and its hash.
    Config,
}

fn run(cli: Cli) -> CliResult<()> {
    let overrides = Overrides {
        sets: cli.sets,
        seed: cli.seed,
        out: cli.out,
    };
    let mut config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::BuildGraph => commands::build_graph(&config),
        Command::Train => commands::train(&config),
        Command::Evaluate { split, checkpoint } => {
            if let Some(s) = split {
                config.evaluate.split = s;
            }
            if checkpoint.is_some() {
                config.paths.checkpoint = checkpoint;
            }
            commands::evaluate(&config, config.evaluate.split)
        }
        Command::Explain {
            week,
            samples,
            checkpoint,
        } => {
            if week.is_some() {
                config.explain.week = week;
            }
            if let Some(s) = samples {
                config.explain.explainer.samples = s;
            }
            if checkpoint.is_some() {
                config.paths.checkpoint = checkpoint;
            }
            commands::explain_cmd(&config)
        }
        Command::ExportViz { what, input } => commands::export_viz(&config, what, input.as_deref()),
        Command::Synth => commands::synth(&config),
        Command::Config => {
            config.validate()?;
            print!("# config hash {}\n{}", config.hash(), config.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
