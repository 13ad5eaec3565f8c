//! `plmpc`: run the benchmark scenarios, check the closed-loop properties and
//! export plotting slices.
//!
//! Exit codes: 0 success, 1 property violation or failed run, 2 usage or
//! configuration error.

mod export;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "plmpc",
    version,
    about = "Learning MPC for periodic repetitive tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate scenarios and write trajectory.csv, summary.json and manifest.json.
    Run(RunArgs),
    /// Simulate scenarios and print the property table.
    Check(RunArgs),
    /// Write state, input and cost slices from a finished run directory.
    ExportFiguresData {
        /// Run directory holding trajectory.csv and scenario.cfg.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Builtin name or scenario file; repeat to run several.
    #[arg(long, required = true)]
    scenario: Vec<String>,
    /// Periods to simulate, the seed period included. Defaults to the scenario's value.
    #[arg(long)]
    cycles: Option<usize>,
    /// Parent directory; each scenario writes into `<out>/<name>`.
    #[arg(long, env = "PLMPC_OUT_DIR")]
    out: Option<PathBuf>,
    /// CSV seed trajectory replacing the scenario's seed policy.
    #[arg(long)]
    seed_override: Option<PathBuf>,
    /// Record per-tick solve times (makes the CSV nondeterministic).
    #[arg(long)]
    timing: bool,
    /// Scenarios simulated concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let code = match cli.command {
        Command::Run(args) => run::cmd_run(&args, true),
        Command::Check(args) => run::cmd_run(&args, false),
        Command::ExportFiguresData { run } => export::cmd_export_figures_data(&run),
    };
    ExitCode::from(code)
}
