use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ver_core::experiment::linear::{run_linear_comparison, write_linear_csv, LinearStrategy};
use ver_core::experiment::trace::{emit_summary, verify_bounds, DEFAULT_TOLERANCE};
use ver_core::experiment::{exit, exit_code, run_experiment, ExperimentConfig};
use ver_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ver", version, about = "Value-of-experience metrics, TD bounds and prioritized replay experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config, writing traces and curves to a directory
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds, replacing the config's list
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Re-check every trace record in a directory against its bounds
    VerifyBounds {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Replay counts on the Linear Grid-World
    LinearCompare {
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "uniform,oracle_td,oracle_evb")]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 300)]
        seeds_per_point: u64,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        /// Also write linear_counts.csv here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write scatter and per-file bound tables under <in>/summary
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run { config, out, seeds, tolerance } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seeds) = seeds {
                cfg.set_seeds(seeds);
                cfg.validate()?;
            }
            let report = run_experiment(&cfg, &out, tolerance)?;
            print!("{}", report.text);
            Ok(if report.tally.is_clean() { exit::SUCCESS } else { exit::VIOLATION })
        }
        Command::VerifyBounds { input, tolerance } => {
            if !input.exists() {
                return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", input.display()))));
            }
            let report = verify_bounds(&input, tolerance)?;
            print!("{}", report.render());
            Ok(if report.is_clean() { exit::SUCCESS } else { exit::VIOLATION })
        }
        Command::LinearCompare { n, strategies, seeds_per_point, gamma, out } => {
            let strategies = strategies.iter().map(|s| s.parse()).collect::<Result<Vec<LinearStrategy>>>()?;
            if seeds_per_point == 0 || n.contains(&0) {
                return Err(Error::Config("n values and seeds-per-point must be positive".into()));
            }
            let seeds: Vec<u64> = (0..seeds_per_point).collect();
            let (rows, _) = run_linear_comparison(&n, &strategies, &seeds, gamma)?;
            println!("{:>4} {:<10} {:>6} {:>14} {:>10} {:>16} {:>8}", "n", "strategy", "seeds", "to_optimal", "std", "to_quiescence", "failures");
            for r in &rows {
                println!(
                    "{:>4} {:<10} {:>6} {:>14.3} {:>10.3} {:>16.3} {:>8}",
                    r.n,
                    r.strategy.as_str(),
                    r.seeds,
                    r.mean_to_optimal,
                    r.std_to_optimal,
                    r.mean_to_quiescence,
                    r.failures
                );
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_linear_csv(&dir.join("linear_counts.csv"), &rows)?;
            }
            Ok(exit::SUCCESS)
        }
        Command::Summarize { input, tolerance } => {
            let rows = emit_summary(&input, tolerance)?;
            println!("wrote {} scatter rows to {}", rows, input.join("summary").display());
            Ok(exit::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
