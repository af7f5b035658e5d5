//! Tabular Q-learning and soft Q-learning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Experience;
use crate::error::{Error, Result};
use crate::numerics::{argmax, lse, max_of, softmax_into, Temperature};
use crate::scalar::Real;

/// Dense `[state][action]` table of action-value estimates, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable<T> {
    values: Vec<T>,
    state_count: usize,
    action_count: usize,
}

impl<T: Real> QTable<T> {
    pub fn zeros(state_count: usize, action_count: usize) -> Result<Self> {
        if state_count == 0 || action_count == 0 {
            return Err(Error::domain("q-table needs at least one state and one action"));
        }
        Ok(Self { values: vec![T::zero(); state_count * action_count], state_count, action_count })
    }

    /// Builds a table from rows; all rows must have the same nonzero length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let action_count = rows.first().map_or(0, Vec::len);
        if action_count == 0 || rows.iter().any(|r| r.len() != action_count) {
            return Err(Error::domain("q-table rows must be nonempty and equal length"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("q-table entries must be finite"));
        }
        Ok(Self { values: rows.concat(), state_count: rows.len(), action_count })
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    #[inline]
    pub fn get(&self, state: usize, action: usize) -> T {
        self.values[state * self.action_count + action]
    }

    #[inline]
    pub fn set(&mut self, state: usize, action: usize, value: T) {
        self.values[state * self.action_count + action] = value;
    }

    #[inline]
    pub fn row(&self, state: usize) -> &[T] {
        &self.values[state * self.action_count..(state + 1) * self.action_count]
    }

    pub fn max_value(&self, state: usize) -> T {
        max_of(self.row(state))
    }

    /// Greedy action with lowest-index tie-break.
    pub fn greedy_action(&self, state: usize) -> usize {
        argmax(self.row(state))
    }

    fn check(&self, e: &Experience<usize, T>) -> Result<()> {
        if e.state >= self.state_count || e.next_state >= self.state_count || e.action >= self.action_count {
            return Err(Error::domain(format!(
                "experience ({}, {}, {}) out of range for {}x{} table",
                e.state, e.action, e.next_state, self.state_count, self.action_count
            )));
        }
        Ok(())
    }
}

/// Exponentially decaying schedule: `start * (end/start)^(t/horizon)`, constant after `horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl EpsilonSchedule {
    pub fn new(start: f64, end: f64, horizon: u64) -> Result<Self> {
        let s = Self { start, end, horizon };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.end > 0.0 && self.end <= self.start && self.start <= 1.0) || self.horizon == 0 {
            return Err(Error::config(format!(
                "epsilon schedule needs 0 < end <= start <= 1 and horizon > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Per-step multiplicative decay factor.
    pub fn factor(&self) -> f64 {
        (self.end / self.start).powf(1.0 / self.horizon as f64)
    }

    pub fn value(&self, step: u64) -> f64 {
        if step >= self.horizon {
            self.end
        } else {
            self.start * self.factor().powf(step as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QAgentConfig<T> {
    pub alpha: T,
    pub gamma: T,
    pub epsilon: EpsilonSchedule,
}

impl<T: Real> QAgentConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > T::zero() && self.alpha <= T::one()) {
            return Err(Error::config(format!("alpha must be in (0,1], got {}", self.alpha)));
        }
        if !(self.gamma >= T::zero() && self.gamma <= T::one()) {
            return Err(Error::config(format!("gamma must be in [0,1], got {}", self.gamma)));
        }
        self.epsilon.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftQAgentConfig<T> {
    pub beta: Temperature<T>,
    pub gamma: T,
}

/// `r + gamma * max_a' Q(s', a') - Q(s, a)`; terminal experiences drop the bootstrap.
pub fn td_error<T: Real>(q: &QTable<T>, e: &Experience<usize, T>, gamma: T) -> Result<T> {
    q.check(e)?;
    Ok(td_unchecked(q, e, gamma))
}

#[inline]
fn td_unchecked<T: Real>(q: &QTable<T>, e: &Experience<usize, T>, gamma: T) -> T {
    let bootstrap = if e.terminal { T::zero() } else { gamma * q.max_value(e.next_state) };
    e.reward + bootstrap - q.get(e.state, e.action)
}

/// Moves `Q(s, a)` by `alpha * TD`; returns the TD error computed before the update.
pub fn q_update<T: Real>(q: &mut QTable<T>, e: &Experience<usize, T>, alpha: T, gamma: T) -> Result<T> {
    let td = td_error(q, e, gamma)?;
    let old = q.get(e.state, e.action);
    q.set(e.state, e.action, old + alpha * td);
    Ok(td)
}

/// `beta * ln sum_a exp(Q(state, a) / beta)`.
pub fn soft_value<T: Real>(q: &QTable<T>, state: usize, beta: Temperature<T>) -> Result<T> {
    if state >= q.state_count {
        return Err(Error::domain(format!("state {state} out of range")));
    }
    Ok(lse(beta.get(), q.row(state)))
}

/// `r + gamma * V_soft(s') - Q(s, a)`; terminal experiences drop the bootstrap.
pub fn soft_td_error<T: Real>(q: &QTable<T>, e: &Experience<usize, T>, beta: Temperature<T>, gamma: T) -> Result<T> {
    q.check(e)?;
    Ok(soft_target(q, e, beta, gamma) - q.get(e.state, e.action))
}

fn soft_target<T: Real>(q: &QTable<T>, e: &Experience<usize, T>, beta: Temperature<T>, gamma: T) -> T {
    if e.terminal {
        e.reward
    } else {
        e.reward + gamma * lse(beta.get(), q.row(e.next_state))
    }
}

/// Replaces `Q(s, a)` by the soft Bellman target `r + gamma * V_soft_old(s')`.
///
/// There is no step size: the entry takes the target outright. Returns the soft TD error.
pub fn soft_q_update<T: Real>(q: &mut QTable<T>, e: &Experience<usize, T>, cfg: &SoftQAgentConfig<T>) -> Result<T> {
    q.check(e)?;
    let target = soft_target(q, e, cfg.beta, cfg.gamma);
    let td = target - q.get(e.state, e.action);
    q.set(e.state, e.action, target);
    Ok(td)
}

/// Exploration rule used to act in the environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BehaviorPolicy<T> {
    EpsilonGreedy { epsilon: f64 },
    Softmax { beta: Temperature<T> },
}

/// Samples an action for a row of action values under `policy`.
pub fn behavior_action<T: Real, R: Rng + ?Sized>(values: &[T], policy: BehaviorPolicy<T>, rng: &mut R) -> usize {
    match policy {
        BehaviorPolicy::EpsilonGreedy { epsilon } => {
            if rng.random::<f64>() < epsilon {
                rng.random_range(0..values.len())
            } else {
                argmax(values)
            }
        }
        BehaviorPolicy::Softmax { beta } => {
            let mut probs = vec![T::zero(); values.len()];
            softmax_into(beta.get(), values, &mut probs);
            sample_categorical(&probs, rng)
        }
    }
}

pub(crate) fn sample_categorical<T: Real, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return i;
        }
    }
    // rounding left u above the accumulated mass: last action with nonzero mass
    probs.iter().rposition(|p| *p > T::zero()).unwrap_or(probs.len() - 1)
}
