use std::path::PathBuf;
use std::process::ExitCode;

use barywin_cli::config::OUT_ENV;
use barywin_cli::error::CliError;
use barywin_cli::report::{report, verify};
use barywin_cli::run::run;
use barywin_cli::{CliResult, ExperimentConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "barywin", version, about = "Wasserstein-2 barycenter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment in a TOML config (or repeat one from its manifest.json).
    Run {
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; also settable through BARYWIN_OUT.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Values above 1 train the solver pairs concurrently. Output is then
        /// no longer covered by the bitwise reproducibility contract.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Suppress per-iteration progress on stderr.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Summary table of the runs in a directory.
    Report { dir: PathBuf },
    /// Re-derive stored scores and invariants from checkpoints.
    Verify { dir: PathBuf },
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            threads,
            quiet,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)) {
                cfg.out = o;
            }
            if threads == 0 {
                return Err(CliError::Config("--threads: must be at least 1".into()));
            }
            if threads > 1 {
                eprintln!("warning: --threads {threads} trains solver pairs concurrently; bitwise reproducibility is only guaranteed with one thread");
                cfg.win.parallel_solvers = true;
            }
            for dir in run(&cfg, !quiet)? {
                println!("{}", dir.display());
            }
            Ok(())
        }
        Command::Report { dir } => {
            print!("{}", report(&dir)?);
            Ok(())
        }
        Command::Verify { dir } => {
            let (text, failed) = verify(&dir)?;
            print!("{text}");
            if failed > 0 {
                return Err(CliError::Verification { failed });
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
