mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tosa_core::tosa_layer::SkipScope;
use tosa_core::training::Phase;

#[derive(Parser)]
#[command(name = "tosa", version, about = "Token-selective attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by every verb that reads a model.
#[derive(Args, Clone, Debug, Default)]
pub struct Routing {
    /// Fraction of tokens each head attends at ToSA layers.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Which sublayers skipped tokens bypass.
    #[arg(long, value_parser = parse_scope)]
    pub skip_scope: Option<SkipScope>,
}

fn parse_scope(s: &str) -> Result<SkipScope, String> {
    s.parse().map_err(|e: tosa_core::Error| e.to_string())
}

fn parse_phase(s: &str) -> Result<run::Only, String> {
    if s == "eval" {
        return Ok(run::Only::Eval);
    }
    s.parse::<Phase>().map(run::Only::Train).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Run the steps of a config file, resuming from the last completed one.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this step (pretrain, selector, finetune, dense or eval).
        #[arg(long, value_parser = parse_phase)]
        phase: Option<run::Only>,
        #[command(flatten)]
        routing: Routing,
    },
    /// Evaluate a checkpoint on a held-out split.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        source: commands::EvalSource,
        #[command(flatten)]
        routing: Routing,
        /// Also write eval.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render token-selection masks for one image as PGM files.
    Visualize {
        checkpoint: PathBuf,
        /// Directory for the mask images.
        #[arg(long)]
        out: PathBuf,
        /// Dataset container to take the image from; defaults to the
        /// procedural test split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Seed of the procedural split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Blend the input image into the masks at 50%.
        #[arg(long)]
        blend: bool,
        #[command(flatten)]
        routing: Routing,
    },
    /// Baseline against ToSA: accuracy, FLOPs, reduction and token counts.
    Report {
        checkpoint: PathBuf,
        /// Checkpoint for the baseline row; defaults to the same weights
        /// under the all-standard schedule.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        source: commands::EvalSource,
        #[command(flatten)]
        routing: Routing,
        /// Also write report.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the analytic cost report as JSON.
    Cost {
        /// Run config whose [model] section to cost.
        #[arg(long, conflicts_with_all = ["checkpoint", "preset"])]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "preset")]
        checkpoint: Option<PathBuf>,
        /// Built-in shape: `desk` or `deit-tiny`.
        #[arg(long)]
        preset: Option<String>,
        /// Leave the selector networks out of the totals.
        #[arg(long)]
        exclude_selector: bool,
        /// Report every skip scope.
        #[arg(long)]
        all_scopes: bool,
        #[command(flatten)]
        routing: Routing,
        /// Also write cost.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            phase,
            routing,
        } => run::run(&config, seed, out, phase, &routing),
        Command::Eval {
            checkpoint,
            source,
            routing,
            out,
        } => commands::eval(&checkpoint, &source, &routing, out.as_deref()),
        Command::Visualize {
            checkpoint,
            out,
            data,
            seed,
            index,
            blend,
            routing,
        } => commands::visualize(&checkpoint, &out, data.as_deref(), seed, index, blend, &routing),
        Command::Report {
            checkpoint,
            baseline,
            source,
            routing,
            out,
        } => commands::report(&checkpoint, baseline.as_deref(), &source, &routing, out.as_deref()),
        Command::Cost {
            config,
            checkpoint,
            preset,
            exclude_selector,
            all_scopes,
            routing,
            out,
        } => commands::cost(
            config.as_deref(),
            checkpoint.as_deref(),
            preset.as_deref(),
            exclude_selector,
            all_scopes,
            &routing,
            out.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
