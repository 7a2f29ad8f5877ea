//! Command-line experiments on random slab waveguides.
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use commands::Command;
use error::CliError;
use output::OutputDir;

#[derive(Debug, Parser)]
#[command(
    name = "rwg",
    version,
    about = "Coupled-mode statistics of randomly perturbed slab waveguides"
)]
struct Cli {
    #[command(subcommand)]
    command: CommandArg,
}

#[derive(Debug, Subcommand)]
enum CommandArg {
    /// Guided modes, propagation constants and mode counts.
    Modes(RunArgs),
    /// Limiting coupling coefficients as JSON.
    Coupling(RunArgs),
    /// Mean powers, second moments and intensity moments along z.
    Moments(RunArgs),
    /// Decay rates, Perron vectors and expansion tables.
    Spectrum(RunArgs),
    /// Weak-dissipation and weak-coupling expansions against exact eigensolves.
    Expansions(RunArgs),
    /// Continuum eigenproblems and the finite-N convergence table.
    Continuum(RunArgs),
    /// Jump-process and SDE estimates against the moment equations.
    Montecarlo(RunArgs),
    /// Scintillation ratio and its growth exponent.
    Scintillation(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML experiment file.
    config: PathBuf,
    /// Output directory (default: `run.output`, then `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `mc.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `mc.paths`.
    #[arg(long)]
    paths: Option<usize>,
    /// `section.key=value` override, TOML syntax for the value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl CommandArg {
    fn split(self) -> (Command, RunArgs) {
        match self {
            CommandArg::Modes(a) => (Command::Modes, a),
            CommandArg::Coupling(a) => (Command::Coupling, a),
            CommandArg::Moments(a) => (Command::Moments, a),
            CommandArg::Spectrum(a) => (Command::Spectrum, a),
            CommandArg::Expansions(a) => (Command::Expansions, a),
            CommandArg::Continuum(a) => (Command::Continuum, a),
            CommandArg::Montecarlo(a) => (Command::MonteCarlo, a),
            CommandArg::Scintillation(a) => (Command::Scintillation, a),
        }
    }
}

fn overrides(args: &RunArgs) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs = args
        .overrides
        .iter()
        .map(|raw| {
            raw.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Invalid {
                    key: raw.clone(),
                    reason: "overrides take the form section.key=value".into(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = args.seed {
        pairs.push(("mc.seed".into(), seed.to_string()));
    }
    if let Some(paths) = args.paths {
        pairs.push(("mc.paths".into(), paths.to_string()));
    }
    Ok(pairs)
}

fn run(command: Command, args: RunArgs) -> Result<(), CliError> {
    let cfg = config::load(&args.config, &overrides(&args)?)?;
    cfg.validate(command.needs())?;
    let root = args
        .out
        .clone()
        .or_else(|| cfg.run.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut out = OutputDir::create(&root)?;
    command.run(&cfg, &mut out)?;
    for path in out.written() {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (command, args) = Cli::parse().command.split();
    match run(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
