use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tembed_cli::commands::{self, SolveCase, SolveOptions, SweepOptions, SweepParam};
use tembed_cli::config::{env_seed, RunConfig};
use tembed_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "tembed",
    version,
    about = "Timestep-embedding diagnostics, training and ODE solves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify whether a block's output depends on time.
    Diagnose {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a block on the configured task.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value and seed, aggregated into sweep.csv.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate a test problem with dopri5.
    Solve {
        /// exp, oscillator or block:<config>
        #[arg(long)]
        testcase: SolveCase,
        #[arg(long)]
        rtol: Option<f64>,
        #[arg(long)]
        atol: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load(path: &Path) -> CliResult<RunConfig> {
    RunConfig::load(path)?.resolve(env_seed()?)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Diagnose { config, out } => {
            let cfg = load(&config)?;
            let report = commands::diagnose(&cfg, &cfg.output_dir(out.as_deref()))?;
            println!("{}", commands::verdict_line(&report));
        }
        Command::Train { config, out } => {
            let cfg = load(&config)?;
            let report = commands::train(&cfg, &cfg.output_dir(out.as_deref()))?;
            println!("{}", commands::train_line(&report));
        }
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            jobs,
            out,
        } => {
            let cfg = load(&config)?;
            let opts = SweepOptions {
                param,
                values,
                seeds,
                jobs,
            };
            let summary = commands::sweep(&cfg, &opts, &cfg.output_dir(out.as_deref()))?;
            for row in &summary.rows {
                println!("{}", commands::sweep_line(row));
            }
        }
        Command::Solve {
            testcase,
            rtol,
            atol,
            max_steps,
            out,
        } => {
            let opts = SolveOptions {
                rtol,
                atol,
                max_steps,
                seed_override: env_seed()?,
            };
            let r = commands::solve(&testcase, &opts, &out)?;
            println!("{}", commands::solve_line(&r));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code as u8)
        }
    }
}
