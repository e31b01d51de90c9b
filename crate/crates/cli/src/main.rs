mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::CliError;

#[derive(Parser)]
#[command(name = "hetxl", version, about = "Heteroscedastic classification heads: data, training, prediction and checks")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "HETXL_THREADS")]
    threads: Option<usize>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Fast,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the synthetic dataset described by the config.
    Datagen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a head on the dataset written by `datagen`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file; defaults to `<output_dir>/dataset.hxlm`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write measured step times into the `ms` column of metrics.csv.
        #[arg(long)]
        timing: bool,
    },
    /// Write predictive probabilities of a trained head.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        level: Level,
    },
    /// Time Monte-Carlo prediction against the analytic cost model.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Select τ by grid search on the validation split.
    GridTau {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} threads: {e}")))?;
    }
    let verbose = cli.verbose;
    match cli.command {
        Command::Datagen { config } => commands::datagen(&config, verbose),
        Command::Train { config, data, timing } => commands::train(&config, data, timing, verbose),
        Command::Predict { config, model, data, out } => commands::predict(&config, model, data, out),
        Command::Verify { level } => commands::verify(match level {
            Level::Fast => hetxl_core::verify::Level::Fast,
            Level::Full => hetxl_core::verify::Level::Full,
        }),
        Command::Bench { config } => commands::bench(&config),
        Command::GridTau { config, data } => commands::grid_tau(&config, data, verbose),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hetxl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
