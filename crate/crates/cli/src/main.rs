use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use etc_hinf_cli::{run, Command, Invocation};

#[derive(Parser)]
#[command(name = "etc-hinf", version, about = "Periodic and event-triggered H-infinity experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Smallest attenuation level for periodic transmission, h = 1..h_max.
    GammaTable(Common),
    /// Closed-loop run with the configured disturbance.
    Simulate(Common),
    /// Closed-loop run against the adversarial disturbance generator.
    Adversary(Common),
    /// Rate and attenuation for a grid of schedulers.
    Sweep(Common),
    /// Sampled check that small kicks never shorten a long gap.
    CheckA5(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    h_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, c) = match cli.command {
        Cmd::GammaTable(c) => (Command::GammaTable, c),
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Adversary(c) => (Command::Adversary, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
        Cmd::CheckA5(c) => (Command::CheckA5, c),
    };
    let inv = Invocation { command, config: c.config, out: c.out, h_max: c.h_max, seed: c.seed };
    match run(&inv) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
