use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod plot;

use commands::CliError;

/// Synthetic vortex flows, tracking, and latent interaction graphs.
#[derive(Parser)]
#[command(name = "vortex-nri", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic field sequences of the severity sweep.
    Gen(Common),
    /// Detect and track vortices into trajectory tensors.
    Track(Common),
    /// Train the interaction model.
    Train(Common),
    /// Evaluate a checkpoint on the train and held-out splits.
    Eval(Common),
    /// Edge-type entropies and their relation to severity.
    Markers(Common),
    /// Train and score the five ablation variants.
    Ablate(Common),
    /// Draw SVG plots from the marker tables.
    Report(Common),
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory; each command writes its own stage subdirectory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Replace an existing non-empty stage directory.
    #[arg(long)]
    pub force: bool,
    /// Print the plan and write nothing.
    #[arg(long)]
    pub dry_run: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Gen(c) => ("gen", c),
        Command::Track(c) => ("track", c),
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Markers(c) => ("markers", c),
        Command::Ablate(c) => ("ablate", c),
        Command::Report(c) => ("report", c),
    };
    let ctx = commands::Context::new(name, common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs.max(1))
        .build()
        .map_err(|e| CliError::usage(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Gen(_) => commands::gen(&ctx),
        Command::Track(_) => commands::track(&ctx),
        Command::Train(_) => commands::train(&ctx),
        Command::Eval(_) => commands::eval(&ctx),
        Command::Markers(_) => commands::markers(&ctx),
        Command::Ablate(_) => commands::ablate(&ctx),
        Command::Report(_) => commands::report(&ctx),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
