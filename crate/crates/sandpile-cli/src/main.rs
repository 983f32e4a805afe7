//! Command-line front end for the exploding-sandpile toolkit: one
//! subcommand per analysis entry point, JSON config files with flag
//! overrides, and reproducible artifacts (every run records a manifest
//! that reproduces it byte for byte).
//!
//! Exit codes: 0 on success, 1 when a run completes but the checked
//! property fails (or a search does not certify), 2 on usage errors.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod recipes;

use config::{CliError, Params};

#[derive(Parser)]
#[command(
    name = "sandpile",
    version,
    about = "Simulate, probe, and measure exploding abelian sandpiles on Z^d"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drop chips on a background and run parallel toppling to its end
    Simulate(Params),
    /// Find the least chip count at the origin that reaches the frontier
    Explode(Params),
    /// Run source-frozen waves: one n-wave, the last-wave threshold search,
    /// or the frozen-path filling experiment (--path)
    Wave(Params),
    /// Sweep every crossing line of a cube and check face/line crossings
    Crossing(Params),
    /// Estimate directional speeds and the rescaled limit shape
    #[command(name = "limit-shape")]
    LimitShape(Params),
    /// Verify the pulsating-front tiling that rules out a limit shape
    Counterexample(Params),
    /// Check recurrence of the all-d background on boxes
    Recurrence(Params),
    /// Measure the internal-spanning probability of threshold fields
    Bootstrap(Params),
    /// Check the face-layer coupling against the lower-dimensional process
    #[command(name = "reduce-dim")]
    ReduceDim(Params),
    /// Emit ready-to-run config files for the standard imagery
    Recipes(Params),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Explode(_) => "explode",
            Command::Wave(_) => "wave",
            Command::Crossing(_) => "crossing",
            Command::LimitShape(_) => "limit-shape",
            Command::Counterexample(_) => "counterexample",
            Command::Recurrence(_) => "recurrence",
            Command::Bootstrap(_) => "bootstrap",
            Command::ReduceDim(_) => "reduce-dim",
            Command::Recipes(_) => "recipes",
        }
    }

    fn params(&self) -> &Params {
        match self {
            Command::Simulate(p)
            | Command::Explode(p)
            | Command::Wave(p)
            | Command::Crossing(p)
            | Command::LimitShape(p)
            | Command::Counterexample(p)
            | Command::Recurrence(p)
            | Command::Bootstrap(p)
            | Command::ReduceDim(p)
            | Command::Recipes(p) => p,
        }
    }
}

fn run(command: &Command) -> Result<String, CliError> {
    let ctx = config::prepare(command.name(), command.params().clone())?;
    ctx.write_manifest()?;
    match command {
        Command::Simulate(_) => commands::simulate(&ctx),
        Command::Explode(_) => commands::explode(&ctx),
        Command::Wave(_) => commands::wave(&ctx),
        Command::Crossing(_) => commands::crossing(&ctx),
        Command::LimitShape(_) => commands::limit_shape(&ctx),
        Command::Counterexample(_) => commands::counterexample(&ctx),
        Command::Recurrence(_) => commands::recurrence(&ctx),
        Command::Bootstrap(_) => commands::bootstrap(&ctx),
        Command::ReduceDim(_) => commands::reduce_dim(&ctx),
        Command::Recipes(_) => recipes::recipes(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(CliError::Failed(msg)) => {
            eprintln!("verification failure: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
