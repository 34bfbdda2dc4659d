use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use draftedit::harness::{init_threads, run, Command, RunConfig};

#[derive(Parser)]
#[command(name = "draftedit", version, about = "Draft-and-Edit decoding for block-diffusion language models")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Train the toy network and write a checkpoint.
    Train(RunArgs),
    /// Decode the evaluation prompts and report TPF and score.
    Decode(RunArgs),
    /// Decode over a grid of thresholds and write the frontier CSV.
    Sweep(RunArgs),
    /// Fine-tune a checkpoint with clipped policy optimisation.
    Rl(RunArgs),
    /// Run the invariant suite.
    Check(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn execute(command: Command, args: RunArgs) -> draftedit::Result<bool> {
    init_threads()?;
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.command = command;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    let outcome = run(&cfg)?;
    println!("{}", outcome.summary);
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (command, args) = match Cli::parse().command {
        Sub::Train(a) => (Command::Train, a),
        Sub::Decode(a) => (Command::Decode, a),
        Sub::Sweep(a) => (Command::Sweep, a),
        Sub::Rl(a) => (Command::Rl, a),
        Sub::Check(a) => (Command::Check, a),
    };
    match execute(command, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
