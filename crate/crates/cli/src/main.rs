use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oscillab_cli::commands::run;
use oscillab_cli::config::{load_config, Command};
use oscillab_cli::error::CliError;

#[derive(Parser)]
#[command(name = "oscillab", version, about = "Two-scale oscillation and homogenization experiments")]
struct Cli {
    /// Override the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    action: Action,
}

#[derive(Subcommand)]
enum Action {
    /// Cell-formula estimates of f_hom over a list of ξ.
    Cellhom { config: PathBuf },
    /// Convex envelope tables and the f_hom = (co f)_hom identity.
    Convexify { config: PathBuf },
    /// Consistency check of a two-scale Young measure read from CSV.
    YmCheck { config: PathBuf },
    /// Pairing and product-structure tests for an oscillation sequence.
    Oscillate { config: PathBuf },
    /// Minimum gaps between the non-local energy and its limit.
    Gamma { config: PathBuf },
    /// Minimum gaps for a single-integral functional.
    SingleGamma { config: PathBuf },
    /// Run whichever command the configuration names.
    Run { config: PathBuf },
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("OSCILLAB_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Invalid(format!("OSCILLAB_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Invalid(e.to_string()))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<u8, CliError> {
    configure_threads()?;
    let (path, requested) = match cli.action {
        Action::Cellhom { config } => (config, Some(Command::Cellhom)),
        Action::Convexify { config } => (config, Some(Command::Convexify)),
        Action::YmCheck { config } => (config, Some(Command::YmCheck)),
        Action::Oscillate { config } => (config, Some(Command::Oscillate)),
        Action::Gamma { config } => (config, Some(Command::Gamma)),
        Action::SingleGamma { config } => (config, Some(Command::SingleGamma)),
        Action::Run { config } => (config, None),
    };
    let mut config = load_config(&path)?;
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    let command = match requested.or(config.command) {
        Some(c) => c,
        None => return Err(CliError::Invalid("'run' needs a \"command\" field in the configuration".into())),
    };
    let outcome = run(&config, command)?;
    println!(
        "{}: {} ({} files in {})",
        command.as_str(),
        if outcome.passed { "pass" } else { "fail" },
        outcome.files.len(),
        config.output_dir.display()
    );
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
