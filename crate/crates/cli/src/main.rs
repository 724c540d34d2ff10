mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use popmove::{Error, ErrorKind, Result};

use commands::Command;
use config::{parse_assignment, parse_text, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "popmove", version)]
#[command(about = "Two-stage hierarchical fitting of animal movement models")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Simulate the resource-selection study
    SimulateRsf(Common),
    /// Simulate the CTDS movement study
    SimulateCtds(Common),
    /// Fit the functional movement model and draw path realizations
    ImputePaths(Common),
    /// Turn imputed paths into CTDS stay/move designs
    Discretize(Common),
    /// Fit every individual independently
    FitStage1(Common),
    /// Recombine stage-one pools into the population-level posterior
    FitStage2(Common),
    /// Fit the full hierarchy as one chain (baseline)
    FitFull(Common),
    /// Posterior summaries and interval plot data
    Diagnose(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Sub {
    fn split(self) -> (Command, Common) {
        match self {
            Sub::SimulateRsf(c) => (Command::SimulateRsf, c),
            Sub::SimulateCtds(c) => (Command::SimulateCtds, c),
            Sub::ImputePaths(c) => (Command::ImputePaths, c),
            Sub::Discretize(c) => (Command::Discretize, c),
            Sub::FitStage1(c) => (Command::FitStage1, c),
            Sub::FitStage2(c) => (Command::FitStage2, c),
            Sub::FitFull(c) => (Command::FitFull, c),
            Sub::Diagnose(c) => (Command::Diagnose, c),
        }
    }
}

fn assignments(common: &Common) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.clone(), source })?;
        out.extend(parse_text(&text, path)?);
    }
    for s in &common.set {
        out.push(parse_assignment(s)?);
    }
    let flags = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("iterations", common.iterations.map(|v| v.to_string())),
        ("burnin", common.burnin.map(|v| v.to_string())),
        ("thin", common.thin.map(|v| v.to_string())),
        ("workers", common.workers.map(|v| v.to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
    ];
    out.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    Ok(out)
}

fn run(command: Command, common: &Common) -> Result<()> {
    let cfg = RunConfig::resolve(command.name(), &command.schema(), &assignments(common)?)?;
    let start = Instant::now();
    command.run(&cfg)?;
    info!("{} finished in {:.3} s", command.name(), start.elapsed().as_secs_f64());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (command, common) = Cli::parse().command.split();
    match run(command, &common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{}: {e}", command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
