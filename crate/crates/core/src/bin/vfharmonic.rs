use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vfharmonic::cli::{cmd_epsilon, cmd_equilibrium, cmd_simulate, cmd_synthesize, CliResult, Overrides, RunConfig};

/// Harmonic modeling and control synthesis for variable-frequency systems.
///
/// The SDP backend used by `synthesize` is chosen with VFHARMONIC_SDP_BACKEND
/// (`ipm`, the default, or `clarabel`).
#[derive(Parser)]
#[command(name = "vfharmonic", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate the pseudo-period and the validity criterion of a frequency profile.
    Epsilon(Common),
    /// Synthesize a periodic state-feedback gain and write it to the output directory.
    Synthesize(Common),
    /// Run a closed-loop PMSM scenario and write the trace and its spectra.
    Simulate(Common),
    /// Compute the phase-periodic equilibrium and its reference trajectories.
    Equilibrium(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Truncation order; overrides the synthesis section.
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop the harmonic oscillator rows from the regulated output.
    #[arg(long)]
    no_mitigation: bool,
}

type CommandFn = fn(&RunConfig, &Overrides) -> CliResult<String>;

fn run(cli: Cli) -> CliResult<String> {
    let (common, cmd): (&Common, CommandFn) = match &cli.command {
        Command::Epsilon(c) => (c, cmd_epsilon),
        Command::Synthesize(c) => (c, cmd_synthesize),
        Command::Simulate(c) => (c, cmd_simulate),
        Command::Equilibrium(c) => (c, cmd_equilibrium),
    };
    let cfg = RunConfig::load(&common.config)?;
    let ov = Overrides { out: common.out.clone(), order: common.order, seed: common.seed, no_mitigation: common.no_mitigation };
    cmd(&cfg, &ov)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
