//! Replays needed to learn the Linear Grid-World under uniform and oracle replay.

use serde::{Deserialize, Serialize};

use crate::envs::{enumerate_linear_buffer, GridAction, LinearGridConfig};
use crate::error::{Error, Result};
use crate::numerics::{RngSeed, Stream};
use crate::replay::{oracle_scores, sample_greedy_oracle, sample_uniform, GreedyCriterion};
use crate::tabular::{q_update, QTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearStrategy {
    Uniform,
    OracleTd,
    OracleEvb,
}

impl LinearStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            LinearStrategy::Uniform => "uniform",
            LinearStrategy::OracleTd => "oracle_td",
            LinearStrategy::OracleEvb => "oracle_evb",
        }
    }

    /// Criterion whose quiescence ends a run; uniform replay watches `|TD|`.
    fn criterion(self) -> GreedyCriterion {
        match self {
            LinearStrategy::OracleEvb => GreedyCriterion::AbsEvb,
            _ => GreedyCriterion::AbsTd,
        }
    }
}

impl std::str::FromStr for LinearStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(LinearStrategy::Uniform),
            "oracle_td" => Ok(LinearStrategy::OracleTd),
            "oracle_evb" => Ok(LinearStrategy::OracleEvb),
            other => Err(Error::config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Replay counts of a single run; `None` means the limit of `100 N^2` replays was hit first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearRun {
    pub n: usize,
    pub strategy: LinearStrategy,
    pub seed: u64,
    pub to_optimal: Option<u64>,
    pub to_quiescence: Option<u64>,
}

/// Greedy action is east in every non-goal grid and strictly beats every other action.
pub fn is_east_optimal(q: &QTable<f64>, n: usize) -> bool {
    let east = GridAction::East as usize;
    (0..n).all(|s| {
        let row = q.row(s);
        row.iter().enumerate().all(|(a, &v)| a == east || v < row[east])
    })
}

pub fn run_linear_single(n: usize, gamma: f64, strategy: LinearStrategy, seed: u64) -> Result<LinearRun> {
    let cfg = LinearGridConfig { n, gamma };
    cfg.validate()?;
    let buffer = enumerate_linear_buffer(&cfg)?;
    let mut q = QTable::<f64>::zeros(n + 1, 4)?;
    let mut rng = RngSeed(seed).stream(Stream::Replay);
    let limit = 100 * (n as u64) * (n as u64);
    let mut run = LinearRun { n, strategy, seed, to_optimal: None, to_quiescence: None };
    let quiet = |q: &QTable<f64>| -> Result<bool> {
        Ok(oracle_scores(&buffer, strategy.criterion(), q, 1.0, gamma)?.iter().all(|&v| v == 0.0))
    };
    for k in 1..=limit {
        let i = match strategy {
            LinearStrategy::Uniform => sample_uniform(buffer.len(), 1, &mut rng)?[0],
            LinearStrategy::OracleTd => sample_greedy_oracle(&buffer, GreedyCriterion::AbsTd, &q, 1.0, gamma)?,
            LinearStrategy::OracleEvb => sample_greedy_oracle(&buffer, GreedyCriterion::AbsEvb, &q, 1.0, gamma)?,
        };
        q_update(&mut q, &buffer[i], 1.0, gamma)?;
        if run.to_optimal.is_none() && is_east_optimal(&q, n) {
            run.to_optimal = Some(k);
        }
        if run.to_quiescence.is_none() && quiet(&q)? {
            run.to_quiescence = Some(k);
        }
        if run.to_optimal.is_some() && run.to_quiescence.is_some() {
            break;
        }
    }
    Ok(run)
}

/// Aggregate over seeds for one `(N, strategy)` point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearSummary {
    pub n: usize,
    pub strategy: LinearStrategy,
    pub seeds: usize,
    pub mean_to_optimal: f64,
    pub std_to_optimal: f64,
    pub mean_to_quiescence: f64,
    pub failures: usize,
}

pub const LINEAR_COLUMNS: [&str; 7] =
    ["n", "strategy", "seeds", "mean_to_optimal", "std_to_optimal", "mean_to_quiescence", "failures"];

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64 } else { 0.0 };
    (m, var.sqrt())
}

/// Runs every `(N, strategy, seed)` combination. Means are over successful runs.
pub fn run_linear_comparison(
    ns: &[usize],
    strategies: &[LinearStrategy],
    seeds: &[u64],
    gamma: f64,
) -> Result<(Vec<LinearSummary>, Vec<LinearRun>)> {
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let mut summaries = Vec::new();
    let mut runs = Vec::new();
    for &n in ns {
        for &strategy in strategies {
            let point: Vec<LinearRun> = seeds.iter().map(|&s| run_linear_single(n, gamma, strategy, s)).collect::<Result<_>>()?;
            let opt: Vec<f64> = point.iter().filter_map(|r| r.to_optimal.map(|k| k as f64)).collect();
            let quiet: Vec<f64> = point.iter().filter_map(|r| r.to_quiescence.map(|k| k as f64)).collect();
            let (mean_to_optimal, std_to_optimal) = mean_std(&opt);
            summaries.push(LinearSummary {
                n,
                strategy,
                seeds: seeds.len(),
                mean_to_optimal,
                std_to_optimal,
                mean_to_quiescence: mean_std(&quiet).0,
                failures: point.iter().filter(|r| r.to_optimal.is_none()).count(),
            });
            runs.extend(point);
        }
    }
    Ok((summaries, runs))
}

pub fn write_linear_csv(path: &std::path::Path, rows: &[LinearSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LINEAR_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.strategy.as_str().to_string(),
            r.seeds.to_string(),
            r.mean_to_optimal.to_string(),
            r.std_to_optimal.to_string(),
            r.mean_to_quiescence.to_string(),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
