use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

mod commands;
mod config;
mod report;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Library(#[from] dissnet::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Hard,
    Soft,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Feasible,
    MaxPassivity,
    MinL2gain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    Nsc1,
    Nsc2,
    Nsc3,
    Nsc4,
}

#[derive(Debug, Parser)]
#[command(name = "dissnet", version, about = "Analyze and synthesize interconnections of dissipative subsystems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Problem configuration (JSON, schema_version 1)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Write simulation traces to this CSV file
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Strictness margin of the LMIs
    #[arg(long, global = true, value_name = "REAL")]
    pub margin: Option<f64>,
    /// Simulation step
    #[arg(long, global = true, value_name = "REAL")]
    pub dt: Option<f64>,
    /// Simulation horizon
    #[arg(long, global = true, value_name = "REAL")]
    pub horizon: Option<f64>,
    /// How the communication graph constrains synthesis
    #[arg(long, global = true, alias = "topology", value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Print the result as JSON instead of a text summary
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Certify a given interconnection
    Analyze,
    /// Synthesize an interconnection
    Synthesize,
    /// Estimate the dissipativity indices of a given interconnection
    Estimate,
    /// Run the sequential agent protocol
    Decentralized,
    /// Simulate a closed loop of first-order delayed systems
    Simulate,
    /// Reproduce one configuration of the built-in five-agent study
    Demo {
        #[arg(value_enum)]
        study: Study,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(report) => {
            let rendered = if cli.json { report.render_json() } else { report.render_text() };
            let _ = writeln!(std::io::stdout(), "{rendered}");
            ExitCode::from(report.status.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
