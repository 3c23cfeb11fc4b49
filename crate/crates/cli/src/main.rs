use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use knudsen_cli::{run, Command};

#[derive(Parser)]
#[command(name = "knudsen", version, about = "Knudsen billiards in random tubes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lipschitz, section and sight-line diagnostics of the tube.
    Validate { config: PathBuf },
    /// Mean squared displacement and the self-diffusion fit.
    Msd { config: PathBuf },
    /// Open-tube gas: density profile and steady-state snapshots.
    Gas { config: PathBuf },
    /// Lifetimes and crossing statistics over the tube-length ladder.
    Crossing { config: PathBuf },
    /// All of the above plus the transport report.
    Report {
        config: PathBuf,
        /// Exit with status 4 unless every check passes.
        #[arg(long)]
        check: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, path) = match cli.cmd {
        Cmd::Validate { config } => (Command::Validate, config),
        Cmd::Msd { config } => (Command::Msd, config),
        Cmd::Gas { config } => (Command::Gas, config),
        Cmd::Crossing { config } => (Command::Crossing, config),
        Cmd::Report { config, check } => (Command::Report { check }, config),
    };
    match run(cmd, &path) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("knudsen: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
