//! Experiment configs, runners and their CSV outputs.
//!
//! A run directory holds, per seed, `trace_seed{S}.csv` plus learning-curve
//! files, and a `report.txt` with the bound tally.

pub mod cartpole;
pub mod linear;
pub mod maze;
pub mod trace;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use cartpole::{run_cartpole, CartPoleExperiment, CartPoleRun};
use linear::{run_linear_comparison, write_linear_csv, LinearStrategy, LinearSummary};
use maze::{run_maze, MazeExperiment, MazeRun};
use trace::{BoundsTally, TraceWriter};

/// Process exit statuses of the CLI.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const VIOLATION: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) => exit::CONFIG,
        Error::Divergence(_) => exit::DIVERGENCE,
        _ => exit::FAILURE,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStat {
    pub episode: u64,
    pub start_step: u64,
    pub steps: u64,
    pub ret: f64,
    pub success: bool,
    /// False for an episode cut off by the end of training.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearExperiment {
    pub n: Vec<usize>,
    pub strategies: Vec<LinearStrategy>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_gamma() -> f64 {
    0.99
}

/// One experiment, selected by the `kind` key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Linear(LinearExperiment),
    Maze(MazeExperiment),
    Cartpole(CartPoleExperiment),
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds().is_empty() {
            return Err(Error::config("seeds must be nonempty"));
        }
        let mut sorted = self.seeds().to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds().len() {
            return Err(Error::config("seeds must be distinct"));
        }
        match self {
            ExperimentConfig::Linear(c) => {
                if c.n.is_empty() || c.n.contains(&0) || c.strategies.is_empty() {
                    return Err(Error::config("linear experiment needs positive n values and at least one strategy"));
                }
                if !(c.gamma > 0.0 && c.gamma < 1.0) {
                    return Err(Error::config("linear gamma must lie in (0, 1)"));
                }
                Ok(())
            }
            ExperimentConfig::Maze(c) => c.validate(),
            ExperimentConfig::Cartpole(c) => c.validate().map_err(|e| match e {
                Error::Domain(m) => Error::Config(m),
                other => other,
            }),
        }
    }

    pub fn seeds(&self) -> &[u64] {
        match self {
            ExperimentConfig::Linear(c) => &c.seeds,
            ExperimentConfig::Maze(c) => &c.seeds,
            ExperimentConfig::Cartpole(c) => &c.seeds,
        }
    }

    pub fn set_seeds(&mut self, seeds: Vec<u64>) {
        match self {
            ExperimentConfig::Linear(c) => c.seeds = seeds,
            ExperimentConfig::Maze(c) => c.seeds = seeds,
            ExperimentConfig::Cartpole(c) => c.seeds = seeds,
        }
    }

    pub fn output_dir(&self) -> Option<&Path> {
        match self {
            ExperimentConfig::Linear(c) => c.output_dir.as_deref(),
            ExperimentConfig::Maze(c) => c.output_dir.as_deref(),
            ExperimentConfig::Cartpole(c) => c.output_dir.as_deref(),
        }
    }
}

/// Per-seed results of a run, in seed order.
#[derive(Debug, Clone)]
pub enum RunResults {
    Linear(Vec<LinearSummary>),
    Maze(Vec<MazeRun>),
    Cartpole(Vec<CartPoleRun>),
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub tally: BoundsTally,
    pub results: RunResults,
    pub text: String,
}

/// Runs `f` for every seed on a pool of scoped threads; results keep seed order.
fn per_seed<R: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(seeds.len()).max(1);
    if workers == 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<R>>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= seeds.len() {
                            break done;
                        }
                        done.push((i, f(seeds[i])));
                    }
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every seed ran")).collect()
}

fn write_episodes(path: &Path, episodes: &[EpisodeStat]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "start_step", "steps", "return", "success", "complete"])?;
    for e in episodes {
        w.write_record([
            e.episode.to_string(),
            e.start_step.to_string(),
            e.steps.to_string(),
            e.ret.to_string(),
            (e.success as u8).to_string(),
            (e.complete as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `cfg` and writes every output file under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, tolerance: f64) -> Result<ExperimentReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut tally = BoundsTally::new(tolerance);
    let mut text = String::new();
    let results = match cfg {
        ExperimentConfig::Linear(c) => {
            let (summary, _) = run_linear_comparison(&c.n, &c.strategies, &c.seeds, c.gamma)?;
            write_linear_csv(&out.join("linear_counts.csv"), &summary)?;
            for r in &summary {
                text.push_str(&format!(
                    "n={:<3} {:<10} seeds={} mean_to_optimal={:.3} std={:.3} mean_to_quiescence={:.3} failures={}\n",
                    r.n,
                    r.strategy.as_str(),
                    r.seeds,
                    r.mean_to_optimal,
                    r.std_to_optimal,
                    r.mean_to_quiescence,
                    r.failures
                ));
            }
            RunResults::Linear(summary)
        }
        ExperimentConfig::Maze(c) => {
            let runs = per_seed(&c.seeds, |seed| {
                let mut w = TraceWriter::create(&out.join(format!("trace_seed{seed}.csv")))?;
                let run = run_maze(c, seed, &mut w, tolerance)?;
                w.finish()?;
                write_episodes(&out.join(format!("episodes_seed{seed}.csv")), &run.episodes)?;
                Ok(run)
            })?;
            for r in &runs {
                tally.merge(&r.tally);
                let rate = r.success_rate_after(c.total_steps, 0.1).map_or("-".to_string(), |v| format!("{v:.3}"));
                text.push_str(&format!(
                    "seed {:<4} records {:<8} violations {:<4} final-10% success {}\n",
                    r.seed,
                    r.tally.records,
                    r.tally.total_violations(),
                    rate
                ));
            }
            RunResults::Maze(runs)
        }
        ExperimentConfig::Cartpole(c) => {
            let runs = per_seed(&c.seeds, |seed| {
                let mut w = TraceWriter::create(&out.join(format!("trace_seed{seed}.csv")))?;
                let run = run_cartpole(c, seed, &mut w, tolerance)?;
                w.finish()?;
                write_episodes(&out.join(format!("episodes_seed{seed}.csv")), &run.episodes)?;
                let mut ev = csv::Writer::from_path(out.join(format!("eval_seed{seed}.csv")))?;
                ev.write_record(["step", "mean_return"])?;
                for e in &run.evals {
                    ev.write_record([e.step.to_string(), e.mean_return.to_string()])?;
                }
                ev.flush()?;
                Ok(run)
            })?;
            for r in &runs {
                tally.merge(&r.tally);
                text.push_str(&format!(
                    "seed {:<4} records {:<8} violations {:<4} eval first-quarter {:.2} last-quarter {:.2}",
                    r.seed,
                    r.tally.records,
                    r.tally.total_violations(),
                    r.eval_mean(0.0, 0.25).unwrap_or(f64::NAN),
                    r.eval_mean(0.75, 1.0).unwrap_or(f64::NAN)
                ));
                if r.priority_check.batches > 0 {
                    text.push_str(&format!(" ver-priority max diff {:e}", r.priority_check.max_abs_diff));
                }
                text.push('\n');
            }
            RunResults::Cartpole(runs)
        }
    };
    text.push_str(&format!("records {}  violations {}\n", tally.records, tally.total_violations()));
    std::fs::write(out.join("report.txt"), &text)?;
    Ok(ExperimentReport { tally, results, text })
}
