use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddgp_cli::{config::ExperimentConfig, CliError};

#[derive(Parser)]
#[command(name = "ddgp", version, about = "Run deep and distributional deep GP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment and write its outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the configured seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root (defaults to $DDGP_OUT_ROOT, then ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved plan without training or writing files.
    Describe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the experiment kinds.
    ListExperiments,
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => load(&config, seed).and_then(|cfg| {
            let root = out.unwrap_or_else(ddgp_cli::default_out_root);
            let outcome = ddgp_cli::run(&cfg, &root)?;
            println!("{}", outcome.dir.display());
            Ok(())
        }),
        Command::Describe { config, seed } => load(&config, seed).and_then(|cfg| {
            print!("{}", ddgp_cli::describe(&cfg)?);
            Ok(())
        }),
        Command::ListExperiments => {
            print!("{}", ddgp_cli::list_experiments());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
