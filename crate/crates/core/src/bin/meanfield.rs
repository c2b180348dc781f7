use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use meanfield::cli::{run_with_workers, Command, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "meanfield", version, about = "Mean-field game and mean-field-type control solver")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Accept non-converged equilibria.
    #[arg(long, global = true)]
    allow_nonconverged: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Audit the model's declared structure and constants.
    Validate,
    /// Solve the matching problem.
    Solve,
    /// Propagation-of-chaos rate of the i.i.d. copies.
    Chaos,
    /// Deviation gains in the finite-agent game.
    Nash,
    /// Equilibria under the φ_n truncation for several levels.
    TruncationStudy,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Validate => Command::Validate,
        Cmd::Solve => Command::Solve,
        Cmd::Chaos => Command::Chaos,
        Cmd::Nash => Command::Nash,
        Cmd::TruncationStudy => Command::TruncationStudy,
    };
    let Some(path) = cli.config else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(2);
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        allow_nonconverged: cli.allow_nonconverged,
    };
    let result = ExperimentConfig::load(&path).and_then(|cfg| run_with_workers(command, cfg, &overrides, cli.workers));
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            println!("outputs in {}", outcome.out_dir.display());
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
