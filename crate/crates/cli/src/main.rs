use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ordlab_core::harness::{self, config, ExperimentConfig, RunOptions};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_ORACLE: u8 = 3;

#[derive(Parser)]
#[command(name = "ordlab", version, about = "Compression-order experiments on small layered models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment a config describes and write its reports
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (default: logical cores)
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory, overriding the config
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config without running it
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the config JSON schema
    Schema,
}

/// A failure tagged with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn classify(err: anyhow::Error) -> Failure {
    let code = match err.downcast_ref::<ordlab_core::Error>() {
        Some(ordlab_core::Error::Config(_)) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    };
    Failure { code, err }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    let src = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(|err| Failure { code: EXIT_CONFIG, err })?;
    ExperimentConfig::parse(&src)
        .with_context(|| path.display().to_string())
        .map_err(|err| Failure { code: EXIT_CONFIG, err })
}

fn run(config: &Path, jobs: Option<usize>, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load(config)?;
    if jobs == Some(0) {
        return Err(Failure { code: EXIT_CONFIG, err: anyhow::anyhow!("--jobs must be at least 1") });
    }
    println!("running {} ({} trials, seed {})", cfg.kind.name(), cfg.trials, cfg.seed);
    let outcome = harness::run(&cfg, &RunOptions { jobs, out }).map_err(|e| classify(e.into()))?;
    println!("{} rows written to {}", outcome.report.table.rows.len(), outcome.out_dir.display());
    for f in &outcome.files {
        println!("  {}", f.display());
    }
    if cfg.kind.is_oracle() && !outcome.report.oracle_ok {
        return Err(Failure {
            code: EXIT_ORACLE,
            err: anyhow::anyhow!("{} oracle failed; see {}", cfg.kind.name(), outcome.out_dir.join("report.json").display()),
        });
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, jobs, out } => run(&config, jobs, out),
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!("{}: ok ({})", config.display(), cfg.kind.name());
            Ok(())
        }
        Command::Schema => {
            let s = serde_json::to_string_pretty(&config::schema())
                .map_err(|e| Failure { code: EXIT_RUNTIME, err: e.into() })?;
            println!("{s}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors count as config errors; clap's own code 2 is taken
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
