//! Config-driven experiment runner. Thin shell over
//! `tulip::experiment`: every verb loads a TOML config, applies
//! command-line overrides, and delegates to the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tulip::experiment::{
    disagreement_map, load_config, run, surface, ExperimentConfig, RunManifest,
};

#[derive(Parser)]
#[command(name = "tulip", version, about = "Uncertainty-estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the configured estimator across all seeds.
    Run(JobArgs),
    /// Sweep imbalance severities; emit accuracy/count surfaces for
    /// norm-constrained and unconstrained models.
    Surface(JobArgs),
    /// Score ensemble and inter-exit disagreement over a 2-D lattice.
    DisagreementMap(JobArgs),
    /// Validate a config and print it fully resolved, defaults included.
    ValidateConfig(JobArgs),
}

#[derive(Args)]
struct JobArgs {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Override the config's seed list, e.g. --seeds 0,1,2.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads for seed-parallel stages (default: all cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

fn resolved(args: &JobArgs) -> tulip::Result<ExperimentConfig> {
    let mut config = load_config(&args.config)?;
    if let Some(dir) = &args.output {
        config.output_dir = dir.clone();
    }
    if let Some(seeds) = &args.seeds {
        config.seeds = seeds.clone();
    }
    config.validate()?;
    Ok(config)
}

fn execute(
    args: &JobArgs,
    job: fn(&ExperimentConfig) -> tulip::Result<RunManifest>,
) -> tulip::Result<ExitCode> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| tulip::Error::InvalidArgument(format!("--threads: {e}")))?;
    }
    let config = resolved(args)?;
    let manifest = job(&config)?;
    for entry in &manifest.seeds {
        match &entry.error {
            None => println!("seed {}: ok ({} files)", entry.seed, entry.files.len()),
            Some(msg) => eprintln!("seed {}: failed: {msg}", entry.seed),
        }
    }
    println!(
        "manifest: {}",
        config.output_dir.join("manifest.json").display()
    );
    if manifest.all_ok() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn dispatch(cli: Cli) -> tulip::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => execute(&args, run),
        Command::Surface(args) => execute(&args, surface),
        Command::DisagreementMap(args) => execute(&args, disagreement_map),
        Command::ValidateConfig(args) => {
            let config = resolved(&args)?;
            print!("{}", config.canonical_toml()?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version land here too; only true usage errors
            // should exit 1.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_usage() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
