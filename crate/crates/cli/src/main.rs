//! `symq`: build abstractions, train, extract and simulate controllers, and
//! run the benchmark experiments from a TOML config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use symq_core::experiments::ExperimentKind;
use symq_core::SymqError;

use crate::commands::RunContext;
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "symq", version, about = "Symbolic-model Q-learning for continuous control")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output root; each run gets its own directory below it.
    #[arg(long, global = true, env = "SYMQ_OUT_DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the symbolic model and write it with its metadata.
    Abstract,
    /// Train the lower and upper Q-tables.
    Train,
    /// Extract both greedy policies from trained Q-tables.
    Policy,
    /// Run a policy in closed loop on the continuous model.
    Simulate,
    /// Precision bounds and the stability check.
    Analyze,
    /// Run one of the scripted experiments.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExperimentName {
    Exp1,
    Exp2,
    Exp3,
    Vdp,
}

impl From<ExperimentName> for ExperimentKind {
    fn from(n: ExperimentName) -> Self {
        match n {
            ExperimentName::Exp1 => ExperimentKind::Exp1,
            ExperimentName::Exp2 => ExperimentKind::Exp2,
            ExperimentName::Exp3 => ExperimentKind::Exp3,
            ExperimentName::Vdp => ExperimentKind::Vdp,
        }
    }
}

fn exit_code(e: &SymqError) -> u8 {
    match e {
        SymqError::ArtifactMismatch(_) => 3,
        SymqError::ConvergenceFailure { .. } => 4,
        _ => 2,
    }
}

fn timestamp() -> String {
    let fmt = time::macros::format_description!("[year][month][day]T[hour][minute][second]Z");
    time::OffsetDateTime::now_utc()
        .format(&fmt)
        .unwrap_or_else(|_| "unknown".into())
}

fn run(cli: Cli) -> Result<PathBuf, SymqError> {
    let path = cli
        .config
        .ok_or_else(|| SymqError::InvalidArgument("--config is required".into()))?;
    let ctx = RunContext {
        config: RunConfig::load(&path)?,
        seed_override: cli.seed,
        out_root: commands::out_root(cli.out),
        timestamp: timestamp(),
    };
    let work = || match cli.command {
        Command::Abstract => commands::cmd_abstract(&ctx),
        Command::Train => commands::cmd_train(&ctx),
        Command::Policy => commands::cmd_policy(&ctx),
        Command::Simulate => commands::cmd_simulate(&ctx),
        Command::Analyze => commands::cmd_analyze(&ctx),
        Command::Experiment { name } => commands::cmd_experiment(&ctx, name.into()),
    };
    match cli.jobs {
        Some(0) => Err(SymqError::InvalidArgument("jobs must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| SymqError::InvalidArgument(format!("cannot start {n} workers: {e}")))?
            .install(work),
        None => work(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
