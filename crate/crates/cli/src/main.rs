use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use irt_core::commands::{self, RunConfig};
use irt_core::IrtError;

const OUT_DIR_ENV: &str = "IRT_OUT_DIR";

#[derive(Parser)]
#[command(name = "irt", version, about = "Sparse multidimensional graded-response IRT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-exact reproducibility.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory. Falls back to $IRT_OUT_DIR, then the current directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a sparse ground truth and responses.
    Simulate(Common),
    /// Exploratory factor analysis with a cutoff partition.
    Factorize(Common),
    /// Calibrate the model for each configured dimensionality.
    Fit(Common),
    /// WAIC for fitted models and their comparison.
    Waic(Common),
    /// Train the scoring encoder against a fitted decoder.
    TrainEncoder(Common),
    /// Score responses with a trained encoder.
    Score(Common),
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, IrtError> {
    let (common, cmd): (&Common, fn(&RunConfig, &std::path::Path) -> irt_core::Result<Vec<PathBuf>>) =
        match &cli.command {
            Command::Simulate(c) => (c, commands::cmd_simulate),
            Command::Factorize(c) => (c, commands::cmd_factorize),
            Command::Fit(c) => (c, commands::cmd_fit),
            Command::Waic(c) => (c, commands::cmd_waic),
            Command::TrainEncoder(c) => (c, commands::cmd_train_encoder),
            Command::Score(c) => (c, commands::cmd_score),
        };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(IrtError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| IrtError::Validation(e.to_string()))?;
    }
    let mut config = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    cmd(&config, &out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
