//! Replay buffer, sum-tree, and the uniform / greedy-oracle / proportional samplers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Experience;
use crate::error::{Error, Result};
use crate::metrics::evb_q_row;
use crate::numerics::argmax;
use crate::scalar::Real;
use crate::tabular::{td_error, QTable};

/// Fixed-capacity FIFO ring of experiences.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<E> {
    capacity: usize,
    entries: Vec<E>,
    cursor: usize,
}

impl<E> ReplayBuffer<E> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        Ok(Self { capacity, entries: Vec::with_capacity(capacity.min(1 << 20)), cursor: 0 })
    }

    /// Stores `e` and returns its slot. At capacity the oldest entry is overwritten.
    pub fn push(&mut self, e: E) -> usize {
        let slot = self.cursor;
        if self.entries.len() < self.capacity {
            self.entries.push(e);
        } else {
            self.entries[slot] = e;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        slot
    }

    pub fn get(&self, i: usize) -> Option<&E> {
        self.entries.get(i)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn as_slice(&self) -> &[E] {
        &self.entries
    }
}

/// I.i.d. uniform indices into a buffer of `len` entries, with replacement.
pub fn sample_uniform<R: Rng + ?Sized>(len: usize, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::usage("sampling from an empty buffer"));
    }
    Ok((0..batch).map(|_| rng.random_range(0..len)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyCriterion {
    AbsTd,
    AbsEvb,
}

/// Criterion value of every buffered experience against the current table.
///
/// For `AbsEvb` this is the EVB the Q-learning update with step size `alpha`
/// would produce if the experience were replayed now.
pub fn oracle_scores<T: Real>(
    buffer: &[Experience<usize, T>],
    criterion: GreedyCriterion,
    q: &QTable<T>,
    alpha: T,
    gamma: T,
) -> Result<Vec<T>> {
    let mut row = Vec::with_capacity(q.action_count());
    buffer
        .iter()
        .map(|e| {
            let td = td_error(q, e, gamma)?;
            Ok(match criterion {
                GreedyCriterion::AbsTd => td.abs(),
                GreedyCriterion::AbsEvb => {
                    row.clear();
                    row.extend_from_slice(q.row(e.state));
                    row[e.action] += alpha * td;
                    evb_q_row(q.row(e.state), &row).abs()
                }
            })
        })
        .collect()
}

/// Index of the experience with the largest criterion (lowest index on ties).
///
/// Rescans the whole buffer on every call.
pub fn sample_greedy_oracle<T: Real>(
    buffer: &[Experience<usize, T>],
    criterion: GreedyCriterion,
    q: &QTable<T>,
    alpha: T,
    gamma: T,
) -> Result<usize> {
    if buffer.is_empty() {
        return Err(Error::usage("oracle sampling from an empty buffer"));
    }
    Ok(argmax(&oracle_scores(buffer, criterion, q, alpha, gamma)?))
}

// ---------------------------------------------------------------------------
// Sum tree

/// Complete binary tree of priorities; each internal node holds the sum of its children.
///
/// Leaves occupy `nodes[size..size + leaf_count]` where `size` is the leaf
/// count rounded up to a power of two; node `i` has children `2i` and `2i + 1`.
#[derive(Debug, Clone)]
pub struct SumTree<T> {
    leaf_count: usize,
    size: usize,
    nodes: Vec<T>,
}

impl<T: Real> SumTree<T> {
    pub fn new(leaf_count: usize) -> Result<Self> {
        if leaf_count == 0 {
            return Err(Error::domain("sum tree needs at least one leaf"));
        }
        let size = leaf_count.next_power_of_two();
        Ok(Self { leaf_count, size, nodes: vec![T::zero(); 2 * size] })
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn total(&self) -> T {
        self.nodes[1]
    }

    pub fn leaf(&self, i: usize) -> T {
        self.nodes[self.size + i]
    }

    /// Sets a leaf and re-sums its ancestors from their children.
    pub fn update(&mut self, leaf: usize, priority: T) -> Result<()> {
        if leaf >= self.leaf_count {
            return Err(Error::domain(format!("leaf {leaf} out of range")));
        }
        if !(priority >= T::zero()) || !priority.is_finite() {
            return Err(Error::domain(format!("priority must be finite and >= 0, got {priority}")));
        }
        let mut i = self.size + leaf;
        self.nodes[i] = priority;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
        Ok(())
    }

    /// Leaf whose cumulative-priority interval `[c_i, c_i + p_i)` contains `prefix`.
    pub fn sample(&self, prefix: T) -> Result<usize> {
        let total = self.total();
        if !(total > T::zero()) {
            return Err(Error::domain("sampling from a sum tree with zero total"));
        }
        if !(prefix >= T::zero() && prefix < total) {
            return Err(Error::domain(format!("prefix {prefix} outside [0, {total})")));
        }
        let mut i = 1;
        let mut rest = prefix;
        while i < self.size {
            let left = self.nodes[2 * i];
            // an empty right subtree can only be reached through rounding
            if rest < left || self.nodes[2 * i + 1] <= T::zero() {
                i = 2 * i;
            } else {
                rest -= left;
                i = 2 * i + 1;
            }
        }
        Ok(i - self.size)
    }

    /// Internal nodes recomputed from scratch, for consistency checks.
    pub fn rebuilt_nodes(&self) -> Vec<T> {
        let mut nodes = self.nodes.clone();
        for i in (1..self.size).rev() {
            nodes[i] = nodes[2 * i] + nodes[2 * i + 1];
        }
        nodes
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }
}

// ---------------------------------------------------------------------------
// Proportional prioritization

/// Which quantity drives a proportional sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityKind {
    /// `|TD|`.
    Per,
    /// `rho_max * |TD_soft|`.
    Ver,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrioritySamplerConfig {
    pub alpha_exp: f64,
    /// Importance-sampling exponent at the start of training.
    pub beta_is: f64,
    /// Value `beta_is` is annealed to, linearly over training.
    pub beta_is_end: f64,
    pub epsilon_prio: f64,
}

impl Default for PrioritySamplerConfig {
    fn default() -> Self {
        Self { alpha_exp: 0.6, beta_is: 0.4, beta_is_end: 1.0, epsilon_prio: 1e-6 }
    }
}

impl PrioritySamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.alpha_exp) || !unit(self.beta_is) || !unit(self.beta_is_end) {
            return Err(Error::config("alpha_exp, beta_is and beta_is_end must lie in [0,1]"));
        }
        if !(self.epsilon_prio > 0.0 && self.epsilon_prio.is_finite()) {
            return Err(Error::config("epsilon_prio must be positive"));
        }
        Ok(())
    }

    /// Linearly annealed IS exponent at `progress` in [0, 1].
    pub fn beta_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.beta_is + (self.beta_is_end - self.beta_is) * p
    }
}

/// Quantity a proportional sampler ranks by, before the floor and exponent.
pub fn raw_priority<T: Real>(kind: PriorityKind, td: T, rho_max: T) -> T {
    match kind {
        PriorityKind::Per => td.abs(),
        PriorityKind::Ver => rho_max * td.abs(),
    }
}

/// `(raw + epsilon_prio)^alpha_exp`; strictly positive for every finite raw value.
pub fn priority_of<T: Real>(raw: T, cfg: &PrioritySamplerConfig) -> T {
    (raw + T::lit(cfg.epsilon_prio)).powf(T::lit(cfg.alpha_exp))
}

/// `w_i = (N * P(i))^-beta_is`, normalized so the largest weight in the batch is 1.
pub fn is_weights<T: Real>(probabilities: &[T], buffer_size: usize, beta_is: T) -> Result<Vec<T>> {
    if probabilities.iter().any(|p| !(*p > T::zero()) || *p > T::one() + T::lit(1e-9)) {
        return Err(Error::domain("sampling probabilities must lie in (0, 1]"));
    }
    let n = T::from_usize_lossy(buffer_size);
    let raw: Vec<T> = probabilities.iter().map(|&p| (n * p).powf(-beta_is)).collect();
    let max = raw.iter().copied().fold(T::zero(), T::max);
    Ok(raw.into_iter().map(|w| w / max).collect())
}

/// One proportional draw: buffer slot, its sampling probability and IS weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PrioritizedBatch<T> {
    pub indices: Vec<usize>,
    pub probabilities: Vec<T>,
    pub weights: Vec<T>,
}

/// Ring buffer paired with a sum tree over its slots.
///
/// New entries get the largest priority seen so far; overwriting a slot
/// replaces its leaf, so evicted priority leaves the total.
#[derive(Debug, Clone)]
pub struct PrioritizedReplay<E, T> {
    buffer: ReplayBuffer<E>,
    tree: SumTree<T>,
    cfg: PrioritySamplerConfig,
    max_priority: T,
}

impl<E, T: Real> PrioritizedReplay<E, T> {
    pub fn new(capacity: usize, cfg: PrioritySamplerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { buffer: ReplayBuffer::new(capacity)?, tree: SumTree::new(capacity)?, cfg, max_priority: T::one() })
    }

    pub fn push(&mut self, e: E) -> Result<usize> {
        let slot = self.buffer.push(e);
        self.tree.update(slot, self.max_priority)?;
        Ok(slot)
    }

    pub fn buffer(&self) -> &ReplayBuffer<E> {
        &self.buffer
    }

    pub fn tree(&self) -> &SumTree<T> {
        &self.tree
    }

    pub fn config(&self) -> &PrioritySamplerConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Stratified proportional draw of `batch` slots with IS weights at exponent `beta_is`.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, beta_is: T, rng: &mut R) -> Result<PrioritizedBatch<T>> {
        if self.buffer.is_empty() {
            return Err(Error::usage("sampling from an empty buffer"));
        }
        let total = self.tree.total();
        let segment = total / T::from_usize_lossy(batch);
        let mut indices = Vec::with_capacity(batch);
        let mut probabilities = Vec::with_capacity(batch);
        for k in 0..batch {
            let u = T::lit(rng.random::<f64>());
            let prefix = ((T::from_usize_lossy(k) + u) * segment).min(total * T::lit(1.0 - 1e-12));
            let idx = self.tree.sample(prefix)?;
            indices.push(idx);
            probabilities.push(self.tree.leaf(idx) / total);
        }
        let weights = is_weights(&probabilities, self.buffer.len(), beta_is)?;
        Ok(PrioritizedBatch { indices, probabilities, weights })
    }

    /// Refreshes slots from raw (pre-floor, pre-exponent) priority values.
    pub fn update_priorities(&mut self, indices: &[usize], raw: &[T]) -> Result<()> {
        for (&i, &r) in indices.iter().zip(raw) {
            if i >= self.buffer.len() {
                return Err(Error::domain(format!("slot {i} not filled")));
            }
            let p = priority_of(r, &self.cfg);
            self.tree.update(i, p)?;
            self.max_priority = self.max_priority.max(p);
        }
        Ok(())
    }
}
