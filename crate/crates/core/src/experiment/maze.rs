//! Tabular Q-learning and soft Q-learning in the grid-world maze.

use serde::{Deserialize, Serialize};

use super::trace::{CheckedSink, TraceRow, TraceSink};
use super::EpisodeStat;
use crate::envs::{Experience, Maze, MazeConfig};
use crate::error::{Error, Result};
use crate::metrics::{Flavor, MetricRecord};
use crate::numerics::{RngSeed, Stream, Temperature};
use crate::replay::{sample_uniform, ReplayBuffer};
use crate::tabular::{behavior_action, q_update, soft_q_update, BehaviorPolicy, EpsilonSchedule, QTable, SoftQAgentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MazeFlavor {
    Q,
    SoftQ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeExperiment {
    pub flavor: MazeFlavor,
    #[serde(default)]
    pub env: MazeConfig,
    /// Step size of the Q-learning agent.
    #[serde(default = "one")]
    pub alpha: f64,
    /// Temperature of the soft agent.
    #[serde(default = "hundred")]
    pub beta: f64,
    /// Exploration of the Q-learning agent; defaults to 1 -> 0.001 over `total_steps`.
    #[serde(default)]
    pub epsilon: Option<EpsilonSchedule>,
    pub total_steps: u64,
    #[serde(default = "default_episode_cap")]
    pub max_episode_steps: u64,
    #[serde(default = "default_replay_capacity")]
    pub replay_capacity: usize,
    #[serde(default = "one_usize")]
    pub replays_per_step: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<std::path::PathBuf>,
}

fn one() -> f64 {
    1.0
}
fn hundred() -> f64 {
    100.0
}
fn one_usize() -> usize {
    1
}
fn default_episode_cap() -> u64 {
    200
}
fn default_replay_capacity() -> usize {
    10_000
}

impl MazeExperiment {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha must lie in (0, 1]"));
        }
        Temperature::new(self.beta).map_err(|e| Error::config(e.to_string()))?;
        if self.total_steps == 0 || self.max_episode_steps == 0 || self.replay_capacity == 0 {
            return Err(Error::config("total_steps, max_episode_steps and replay_capacity must be positive"));
        }
        self.schedule().validate()?;
        Maze::new(self.env.clone()).map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> EpsilonSchedule {
        self.epsilon.unwrap_or(EpsilonSchedule { start: 1.0, end: 0.001, horizon: self.total_steps })
    }

    pub fn record_flavor(&self) -> Flavor {
        match self.flavor {
            MazeFlavor::Q => Flavor::Plain,
            MazeFlavor::SoftQ => Flavor::Soft,
        }
    }
}

/// Output of one maze run.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeRun {
    pub seed: u64,
    pub episodes: Vec<EpisodeStat>,
    pub tally: super::trace::BoundsTally,
    pub q: QTable<f64>,
}

impl MazeRun {
    /// Fraction of finished episodes starting in the last `fraction` of training that reach the goal.
    pub fn success_rate_after(&self, total_steps: u64, fraction: f64) -> Option<f64> {
        let from = ((1.0 - fraction) * total_steps as f64).ceil() as u64;
        let late: Vec<_> = self.episodes.iter().filter(|e| e.complete && e.start_step >= from).collect();
        if late.is_empty() {
            return None;
        }
        Some(late.iter().filter(|e| e.success).count() as f64 / late.len() as f64)
    }
}

/// Trains one agent, logging a record for every online and replayed update.
pub fn run_maze(cfg: &MazeExperiment, seed: u64, sink: &mut dyn TraceSink, tolerance: f64) -> Result<MazeRun> {
    cfg.validate()?;
    let maze = Maze::new(cfg.env.clone())?;
    let gamma = cfg.env.gamma;
    let beta = Temperature::new(cfg.beta)?;
    let soft = SoftQAgentConfig { beta, gamma };
    let schedule = cfg.schedule();
    let flavor = cfg.record_flavor();
    let mut q = QTable::<f64>::zeros(maze.state_count(), 4)?;
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity)?;
    let mut act_rng = RngSeed(seed).stream(Stream::Action);
    let mut replay_rng = RngSeed(seed).stream(Stream::Replay);
    let mut sink = CheckedSink::new(sink, tolerance);
    let mut episodes = Vec::new();
    let mut old = vec![0.0; 4];

    let mut update = |q: &mut QTable<f64>, e: &Experience<usize>, step: u64, episode: u64, sink: &mut CheckedSink| -> Result<()> {
        old.copy_from_slice(q.row(e.state));
        let record = match cfg.flavor {
            MazeFlavor::Q => {
                let td = q_update(q, e, cfg.alpha, gamma)?;
                MetricRecord::plain(&old, q.row(e.state), e.action, td, cfg.alpha, flavor)
            }
            MazeFlavor::SoftQ => {
                let td = soft_q_update(q, e, &soft)?;
                MetricRecord::soft(&old, q.row(e.state), e.action, td, beta, flavor)
            }
        };
        sink.push(&TraceRow { step, episode, state: e.state.to_string(), action: e.action, reward: e.reward, record })
    };

    let mut step = 0u64;
    let mut episode = 0u64;
    while step < cfg.total_steps {
        let start_step = step;
        let mut s = maze.start_state();
        let mut stat = EpisodeStat { episode, start_step, steps: 0, ret: 0.0, success: false, complete: false };
        loop {
            let policy = match cfg.flavor {
                MazeFlavor::Q => BehaviorPolicy::EpsilonGreedy { epsilon: schedule.value(step) },
                MazeFlavor::SoftQ => BehaviorPolicy::Softmax { beta },
            };
            let a = behavior_action(q.row(s), policy, &mut act_rng);
            let tr = maze.transition(s, a)?;
            let e = Experience { state: s, action: a, reward: tr.reward, next_state: tr.next_state, terminal: tr.terminal };
            update(&mut q, &e, step, episode, &mut sink)?;
            buffer.push(e);
            for _ in 0..cfg.replays_per_step {
                let i = sample_uniform(buffer.len(), 1, &mut replay_rng)?[0];
                let replayed = buffer.as_slice()[i].clone();
                update(&mut q, &replayed, step, episode, &mut sink)?;
            }
            step += 1;
            stat.steps += 1;
            stat.ret += tr.reward;
            if tr.terminal {
                stat.success = true;
                stat.complete = true;
                break;
            }
            if stat.steps >= cfg.max_episode_steps {
                stat.complete = true;
                break;
            }
            if step >= cfg.total_steps {
                break;
            }
            s = tr.next_state;
        }
        episodes.push(stat);
        episode += 1;
    }
    Ok(MazeRun { seed, episodes, tally: sink.tally, q })
}
