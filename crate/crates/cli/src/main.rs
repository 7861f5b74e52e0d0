use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cin_cli::{cmd_montecarlo, cmd_run};

/// Stop-line-aided cooperative inertial navigation simulator.
#[derive(Parser)]
#[command(name = "cin", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write traces, metrics, and the comparison
    /// table.
    Run {
        /// Scenario configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for trace CSVs and metrics.json.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of sp,sl-sp,cp,sl-cp.
        #[arg(long)]
        methods: Option<String>,
    },
    /// Run a Monte Carlo batch (seeds seed..seed+N-1) and write the
    /// aggregate summary.
    Montecarlo {
        #[arg(long)]
        config: PathBuf,
        /// Number of runs.
        #[arg(long)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of sp,sl-sp,cp,sl-cp.
        #[arg(long)]
        methods: Option<String>,
    },
}

fn main() -> ExitCode {
    // Log level comes from CIN_LOG (default warn).
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CIN_LOG", "warn")).init();

    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            out,
            seed,
            methods,
        } => cmd_run(config, out, *seed, methods.as_deref()).map(|_| ()),
        Command::Montecarlo {
            config,
            runs,
            out,
            methods,
        } => cmd_montecarlo(config, *runs, out, methods.as_deref()).map(|_| ()),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
