use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ls3d_cli::commands::{self, Context};
use ls3d_cli::{CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "ls3d", version, about = "Learnable-sampling 3D convolution experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file of `key = value` lines (`#` starts a comment).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key; may be repeated. Wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Directory for every output file.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,

    /// Shorthand for `--set train.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Concurrent training runs for `ablate`; kernels are single-threaded.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train a network; writes a checkpoint, loss and evaluation CSVs.
    Train,
    /// Score a checkpoint (`eval.checkpoint`) on the held-out clips.
    Eval,
    /// Finite-difference check of random LS3D layers and a tiny network.
    Gradcheck,
    /// Train every placement / depth variant over `ablate.seeds`.
    Ablate,
    /// Sampling map of one output pixel as PGM images and a top-50 CSV.
    Viz,
    /// Time the reference convolution against the fast paths.
    Bench,
}

fn run(cli: &Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        config.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        config.set("train.seed", &seed.to_string())?;
    }
    config.resolve()?;
    std::fs::create_dir_all(&cli.out)?;
    let ctx = Context {
        config,
        out: cli.out.clone(),
        threads: cli.threads.max(1),
    };
    match cli.command {
        Command::Train => commands::train(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Gradcheck => commands::gradcheck(&ctx),
        Command::Ablate => commands::ablate(&ctx),
        Command::Viz => commands::viz(&ctx),
        Command::Bench => commands::bench(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
