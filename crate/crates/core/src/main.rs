use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfbsde::scenario::{error_exit_code, parse_config, run, Mode};

/// Mean-field BSDE solvers with jumps.
#[derive(Parser)]
#[command(name = "mfbsde", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Picard / least-squares Monte Carlo solve of a driver and terminal condition.
    Picard(RunArgs),
    /// Closed-form solution of a linear mean-field equation.
    Linear(RunArgs),
    /// Comparison of two equations on a shared ensemble.
    Compare(RunArgs),
    /// Adjoints, candidate control and utility scan.
    Utility(RunArgs),
    /// Change-of-measure solve of the special linear equation.
    Qcheck(RunArgs),
    /// Parse and validate a scenario without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the scenario file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the number of paths.
    #[arg(long)]
    paths: Option<usize>,
}

fn read(path: &PathBuf) -> Result<String, ExitCode> {
    std::fs::read_to_string(path).map_err(|e| {
        eprintln!("cannot read {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (mode, args) = match cli.command {
        Command::Validate { config } => {
            let text = match read(&config) {
                Ok(t) => t,
                Err(c) => return c,
            };
            return match parse_config(&text) {
                Ok(c) => {
                    println!("valid {} scenario: {} paths, {} steps, {} atoms", c.mode.name(), c.n_paths, c.steps, c.levy.len());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(2)
                }
            };
        }
        Command::Picard(a) => (Mode::Picard, a),
        Command::Linear(a) => (Mode::Linear, a),
        Command::Compare(a) => (Mode::Compare, a),
        Command::Utility(a) => (Mode::Utility, a),
        Command::Qcheck(a) => (Mode::QCheck, a),
    };
    let text = match read(&args.config) {
        Ok(t) => t,
        Err(c) => return c,
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    if cfg.mode != mode {
        eprintln!("mode: the scenario declares {:?} but the {} subcommand was used", cfg.mode.name(), mode.name());
        return ExitCode::from(2);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.paths {
        if n == 0 {
            eprintln!("--paths must be at least 1");
            return ExitCode::from(2);
        }
        cfg.n_paths = n;
    }
    match run(&cfg, &text, &args.out) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("wrote {} files and {}", outcome.files.len(), outcome.manifest.display());
            ExitCode::from(outcome.status.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(error_exit_code(&e) as u8)
        }
    }
}
