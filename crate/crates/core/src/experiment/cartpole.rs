//! DQN and soft DQN on CartPole with uniform, PER or VER replay.

use serde::{Deserialize, Serialize};

use super::trace::{join_features, BoundsTally, CheckedSink, TraceRow, TraceSink};
use super::EpisodeStat;
use crate::envs::{CartPole, CartPoleConfig, Environment, Experience};
use crate::error::{Error, Result};
use crate::funcapprox::{metrics_from_row, ver_raw_priority, FaUpdateConfig, Learner, Mlp, TargetKind};
use crate::numerics::{RngSeed, Stream, Temperature};
use crate::replay::{sample_uniform, PrioritizedReplay, PriorityKind, PrioritySamplerConfig, ReplayBuffer};
use crate::tabular::{behavior_action, BehaviorPolicy, EpsilonSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CartPoleAgent {
    Dqn,
    SoftDqn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayStrategy {
    Uniform,
    Per,
    Ver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartPoleExperiment {
    pub agent: CartPoleAgent,
    pub replay: ReplayStrategy,
    #[serde(default)]
    pub env: CartPoleConfig,
    #[serde(default)]
    pub learner: FaUpdateConfig,
    #[serde(default)]
    pub sampler: PrioritySamplerConfig,
    /// Exploration of the DQN agent.
    #[serde(default = "default_epsilon")]
    pub epsilon: EpsilonSchedule,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<std::path::PathBuf>,
}

fn default_epsilon() -> EpsilonSchedule {
    EpsilonSchedule { start: 1.0, end: 0.01, horizon: 10_000 }
}
fn default_eval_interval() -> u64 {
    1000
}
fn default_eval_episodes() -> usize {
    10
}

impl CartPoleExperiment {
    pub fn validate(&self) -> Result<()> {
        if self.replay == ReplayStrategy::Ver && self.agent != CartPoleAgent::SoftDqn {
            return Err(Error::config("ver replay requires the soft_dqn agent"));
        }
        self.env.validate()?;
        self.learner.validate()?;
        self.sampler.validate()?;
        self.epsilon.validate()?;
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::config("eval_interval and eval_episodes must be positive"));
        }
        Ok(())
    }

    pub fn target_kind(&self) -> Result<TargetKind<f64>> {
        Ok(match self.agent {
            CartPoleAgent::Dqn => TargetKind::Max,
            CartPoleAgent::SoftDqn => TargetKind::Soft(Temperature::new(self.learner.beta)?),
        })
    }

    fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![4];
        s.extend(&self.learner.hidden);
        s.push(2);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub step: u64,
    pub mean_return: f64,
}

/// Agreement between stored VER priorities and the logged upper bounds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PriorityCheck {
    pub batches: u64,
    pub samples: u64,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone)]
pub struct CartPoleRun {
    pub seed: u64,
    pub episodes: Vec<EpisodeStat>,
    pub evals: Vec<EvalPoint>,
    pub tally: BoundsTally,
    pub priority_check: PriorityCheck,
    pub params: Mlp<f64>,
}

impl CartPoleRun {
    /// Mean evaluation return over the evaluations in `[from, to)` fractions of the run.
    pub fn eval_mean(&self, from: f64, to: f64) -> Option<f64> {
        let n = self.evals.len();
        let (a, b) = ((from * n as f64).floor() as usize, (to * n as f64).ceil() as usize);
        let slice = &self.evals[a.min(n)..b.min(n)];
        (!slice.is_empty()).then(|| slice.iter().map(|e| e.mean_return).sum::<f64>() / slice.len() as f64)
    }
}

type Exp = Experience<[f64; 4], f64>;

enum Replay {
    Uniform(ReplayBuffer<Exp>),
    Prioritized(PrioritizedReplay<Exp, f64>, PriorityKind),
}

impl Replay {
    fn len(&self) -> usize {
        match self {
            Replay::Uniform(b) => b.len(),
            Replay::Prioritized(p, _) => p.len(),
        }
    }

    fn push(&mut self, e: Exp) -> Result<()> {
        match self {
            Replay::Uniform(b) => {
                b.push(e);
            }
            Replay::Prioritized(p, _) => {
                p.push(e)?;
            }
        }
        Ok(())
    }

    fn get(&self, i: usize) -> &Exp {
        match self {
            Replay::Uniform(b) => &b.as_slice()[i],
            Replay::Prioritized(p, _) => &p.buffer().as_slice()[i],
        }
    }
}

fn act<R: rand::Rng + ?Sized>(row: &[f64], agent: CartPoleAgent, epsilon: f64, beta: f64, rng: &mut R) -> Result<usize> {
    Ok(match agent {
        CartPoleAgent::Dqn => behavior_action(row, BehaviorPolicy::EpsilonGreedy { epsilon }, rng),
        CartPoleAgent::SoftDqn => behavior_action(row, BehaviorPolicy::Softmax { beta: Temperature::new(beta)? }, rng),
    })
}

/// Mean return over fresh episodes, acting greedily (dqn) or by softmax sampling (soft_dqn).
pub fn evaluate<R: rand::Rng + ?Sized>(net: &Mlp<f64>, cfg: &CartPoleExperiment, rng: &mut R) -> Result<f64> {
    let mut env = CartPole::new(cfg.env)?;
    let mut total = 0.0;
    for _ in 0..cfg.eval_episodes {
        let mut s = env.reset(rng);
        loop {
            let q = net.forward(&s.features())?;
            let a = act(&q, cfg.agent, 0.0, cfg.learner.beta, rng)?;
            let tr = env.step(a)?;
            total += tr.reward;
            if tr.terminal || tr.truncated {
                break;
            }
            s = tr.next_state;
        }
    }
    Ok(total / cfg.eval_episodes as f64)
}

/// Trains one agent, logging a record for every minibatch sample.
pub fn run_cartpole(cfg: &CartPoleExperiment, seed: u64, sink: &mut dyn TraceSink, tolerance: f64) -> Result<CartPoleRun> {
    cfg.validate()?;
    let l = &cfg.learner;
    let kind = cfg.target_kind()?;
    let seeds = RngSeed(seed);
    let (mut env_rng, mut act_rng, mut replay_rng, mut eval_rng) =
        (seeds.stream(Stream::Env), seeds.stream(Stream::Action), seeds.stream(Stream::Replay), seeds.stream(Stream::Eval));
    let mut net = Mlp::<f64>::new(&cfg.layer_sizes(), &mut seeds.stream(Stream::Init))?;
    let mut target = (l.target_sync_period > 0).then(|| net.clone());
    let mut learner = Learner::new(&net);
    let mut replay = match cfg.replay {
        ReplayStrategy::Uniform => Replay::Uniform(ReplayBuffer::new(l.buffer_capacity)?),
        ReplayStrategy::Per => Replay::Prioritized(PrioritizedReplay::new(l.buffer_capacity, cfg.sampler)?, PriorityKind::Per),
        ReplayStrategy::Ver => Replay::Prioritized(PrioritizedReplay::new(l.buffer_capacity, cfg.sampler)?, PriorityKind::Ver),
    };
    let mut sink = CheckedSink::new(sink, tolerance);
    let mut env = CartPole::new(cfg.env)?;
    let mut s = env.reset(&mut env_rng);
    let mut episodes = Vec::new();
    let mut evals = Vec::new();
    let mut check = PriorityCheck::default();
    let mut stat = EpisodeStat { episode: 0, start_step: 0, steps: 0, ret: 0.0, success: false, complete: false };
    let ones = vec![1.0; l.batch];
    let mut raw = Vec::with_capacity(l.batch);

    for step in 0..l.total_steps {
        let x = s.features();
        let a = act(&net.forward(&x)?, cfg.agent, cfg.epsilon.value(step), l.beta, &mut act_rng)?;
        let tr = env.step(a)?;
        replay.push(Experience { state: x, action: a, reward: tr.reward, next_state: tr.next_state.features(), terminal: tr.terminal })?;
        stat.steps += 1;
        stat.ret += tr.reward;
        let episode = stat.episode;
        if tr.terminal || tr.truncated {
            // surviving to the step limit counts as success
            stat.success = tr.truncated;
            stat.complete = true;
            episodes.push(stat);
            stat = EpisodeStat { episode: episode + 1, start_step: step + 1, steps: 0, ret: 0.0, success: false, complete: false };
            s = env.reset(&mut env_rng);
        } else {
            s = tr.next_state;
        }

        if replay.len() >= l.batch {
            let (indices, weights) = match &replay {
                Replay::Uniform(b) => (sample_uniform(b.len(), l.batch, &mut replay_rng)?, ones.clone()),
                Replay::Prioritized(p, _) => {
                    let beta_is = cfg.sampler.beta_at(step as f64 / l.total_steps as f64);
                    let b = p.sample(l.batch, beta_is, &mut replay_rng)?;
                    (b.indices, b.weights)
                }
            };
            let batch: Vec<&Exp> = indices.iter().map(|&i| replay.get(i)).collect();
            let out = learner.update(&mut net, target.as_ref(), &batch, &weights, l.gamma, kind, l.learning_rate)?;
            raw.clear();
            for (k, e) in batch.iter().enumerate() {
                let record = metrics_from_row(&out.rows[k], e.action, out.targets[k], kind);
                if let Replay::Prioritized(_, pk) = &replay {
                    let r = match (pk, kind) {
                        (PriorityKind::Ver, TargetKind::Soft(beta)) => ver_raw_priority(&out.rows[k], e.action, out.targets[k], beta),
                        _ => out.tds[k].abs(),
                    };
                    if *pk == PriorityKind::Ver {
                        check.max_abs_diff = check.max_abs_diff.max((r - record.upper_bound).abs());
                        check.samples += 1;
                    }
                    raw.push(r);
                }
                sink.push(&TraceRow {
                    step,
                    episode,
                    state: join_features(&e.state),
                    action: e.action,
                    reward: e.reward,
                    record,
                })?;
            }
            if let Replay::Prioritized(p, pk) = &mut replay {
                if *pk == PriorityKind::Ver {
                    check.batches += 1;
                }
                p.update_priorities(&indices, &raw)?;
            }
        }

        if let Some(t) = target.as_mut() {
            if (step + 1) % l.target_sync_period == 0 {
                t.clone_from(&net);
            }
        }
        if (step + 1) % cfg.eval_interval == 0 {
            evals.push(EvalPoint { step: step + 1, mean_return: evaluate(&net, cfg, &mut eval_rng)? });
        }
    }
    Ok(CartPoleRun { seed, episodes, evals, tally: sink.tally, priority_check: check, params: net })
}
