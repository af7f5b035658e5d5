//! Feedforward Q-network with hand-written forward and backward passes,
//! semi-gradient TD updates, and target-substituted value metrics.
//!
//! # Checkpoint layout
//!
//! All integers and floats little-endian:
//!
//! ```text
//! u64            k = number of layer sizes (input, hidden..., output)
//! u64 * k        layer sizes
//! f64 * ...      for each layer in order: weights (outputs x inputs, row-major), then biases
//! ```

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Experience;
use crate::error::{Error, Result};
use crate::metrics::{Flavor, MetricRecord};
use crate::numerics::{lse, max_of, softmax_vec, Temperature};
use crate::scalar::Real;

/// Fully connected layer; `weights[o * inputs + i]` connects input `i` to output `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![T::zero(); inputs * outputs], bias: vec![T::zero(); outputs] }
    }

    #[inline]
    fn row(&self, o: usize) -> &[T] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    fn forward_into(&self, x: &[T], z: &mut [T]) {
        for (o, zo) in z.iter_mut().enumerate() {
            *zo = self.bias[o] + dot(self.row(o), x);
        }
    }
}

/// Dot product with four interleaved accumulators; the reduction order is fixed.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Multilayer perceptron: ReLU hidden layers, linear output (one unit per action).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
}

/// Gradient with the same shape as the network parameters.
pub type Gradients<T> = Mlp<T>;

/// Activations retained from a forward pass for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache<T> {
    /// `acts[0]` is the input; `acts[l + 1]` is layer `l`'s output after its activation.
    acts: Vec<Vec<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl<T: Real> Mlp<T> {
    /// All-zero network with the given layer sizes (input first, output last).
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::domain(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self { layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() })
    }

    /// Weights and biases drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = T::lit(rng.random_range(-bound..=bound));
            }
        }
        Ok(net)
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn action_count(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in checkpoint order.
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::domain(format!("expected {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Action values for one state.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)?;
        Ok(cache.acts.pop().unwrap_or_default())
    }

    /// Forward pass that keeps every activation in `cache`.
    pub fn forward_cached(&self, x: &[T], cache: &mut ForwardCache<T>) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::domain(format!("input has {} features, network expects {}", x.len(), self.input_len())));
        }
        cache.acts.resize_with(self.layers.len() + 1, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (prev, next) = cache.acts.split_at_mut(l + 1);
            let out = &mut next[0];
            out.resize(layer.outputs, T::zero());
            layer.forward_into(&prev[l], out);
            if l != last {
                for v in out.iter_mut() {
                    *v = v.max(T::zero());
                }
            }
        }
        Ok(())
    }

    /// Adds `scale * dQ(x, action)/dtheta` into `grad`, using activations cached for `x`.
    fn accumulate_grad(&self, cache: &ForwardCache<T>, action: usize, scale: T, grad: &mut Gradients<T>, delta: &mut Vec<T>, prev: &mut Vec<T>) {
        let n = self.layers.len();
        delta.clear();
        delta.resize(self.layers[n - 1].outputs, T::zero());
        delta[action] = T::one();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let input = &cache.acts[l];
            let g = &mut grad.layers[l];
            if l > 0 {
                prev.clear();
                prev.resize(layer.inputs, T::zero());
            }
            for (o, &d) in delta.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                let s = scale * d;
                g.bias[o] += s;
                axpy(s, input, &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs]);
                if l > 0 {
                    axpy(d, layer.row(o), prev);
                }
            }
            if l > 0 {
                // ReLU derivative: zero where the unit was inactive
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= T::zero() {
                        *p = T::zero();
                    }
                }
                std::mem::swap(delta, prev);
            }
        }
    }

    /// Gradient of the scalar `Q(x, action)` with respect to every parameter.
    pub fn grad_q(&self, x: &[T], action: usize) -> Result<Gradients<T>> {
        if action >= self.action_count() {
            return Err(Error::domain(format!("action {action} out of range")));
        }
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)?;
        let mut grad = self.zeros_like();
        self.accumulate_grad(&cache, action, T::one(), &mut grad, &mut Vec::new(), &mut Vec::new());
        Ok(grad)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: T, other: &Gradients<T>) {
        for (l, g) in self.layers.iter_mut().zip(&other.layers) {
            axpy(scale, &g.weights, &mut l.weights);
            axpy(scale, &g.bias, &mut l.bias);
        }
    }

    fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = T::zero());
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let sizes = self.sizes();
        w.write_all(&(sizes.len() as u64).to_le_bytes())?;
        for s in sizes {
            w.write_all(&(s as u64).to_le_bytes())?;
        }
        for v in self.flat() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut word)?;
            Ok(word)
        };
        let k = u64::from_le_bytes(next(&mut r)?) as usize;
        if !(2..=64).contains(&k) {
            return Err(Error::domain(format!("implausible layer count {k} in checkpoint")));
        }
        let sizes = (0..k).map(|_| Ok(u64::from_le_bytes(next(&mut r)?) as usize)).collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(&sizes)?;
        let flat = (0..net.param_count()).map(|_| Ok(T::lit(f64::from_le_bytes(next(&mut r)?)))).collect::<Result<Vec<_>>>()?;
        net.set_flat(&flat)?;
        Ok(net)
    }
}

/// Bootstrap rule for the update target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetKind<T> {
    /// `r + gamma * max_a' Q(s', a')`.
    Max,
    /// `r + gamma * beta * ln sum_a' exp(Q(s', a') / beta)`.
    Soft(Temperature<T>),
}

impl<T: Real> TargetKind<T> {
    pub fn flavor(&self) -> Flavor {
        match self {
            TargetKind::Max => Flavor::FaPlain,
            TargetKind::Soft(_) => Flavor::FaSoft,
        }
    }

    /// Bootstrap value of a next-state row.
    #[inline]
    pub fn next_value(&self, row: &[T]) -> T {
        match self {
            TargetKind::Max => max_of(row),
            TargetKind::Soft(beta) => lse(beta.get(), row),
        }
    }
}

/// Update target for `e` under network `target`; terminal experiences give `r`.
pub fn td_target<T: Real, S: AsRef<[T]>>(target: &Mlp<T>, e: &Experience<S, T>, gamma: T, kind: TargetKind<T>) -> Result<T> {
    if e.terminal {
        return Ok(e.reward);
    }
    let next = target.forward(e.next_state.as_ref())?;
    Ok(e.reward + gamma * kind.next_value(&next))
}

/// Hyperparameters of the neural agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaUpdateConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    pub total_steps: u64,
    /// Temperature of the soft agent.
    pub beta: f64,
    /// Steps between target-network syncs; 0 bootstraps from the online network.
    pub target_sync_period: u64,
    pub hidden: Vec<usize>,
}

impl Default for FaUpdateConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            gamma: 0.99,
            batch: 16,
            buffer_capacity: 1000,
            total_steps: 50_000,
            beta: 0.5,
            target_sync_period: 100,
            hidden: vec![256, 256],
        }
    }
}

impl FaUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0,1]"));
        }
        if self.batch == 0 || self.buffer_capacity == 0 || self.total_steps == 0 || self.hidden.contains(&0) {
            return Err(Error::config("batch, buffer_capacity, total_steps and hidden sizes must be positive"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta must be positive"));
        }
        Ok(())
    }
}

/// Per-sample results of one minibatch update, all computed with the pre-update parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MinibatchOutcome<T> {
    pub tds: Vec<T>,
    pub targets: Vec<T>,
    /// Online action values of each sampled state.
    pub rows: Vec<Vec<T>>,
}

/// Activations of a whole minibatch; `acts[l]` is `batch x units`, row-major.
#[derive(Debug, Clone, Default)]
pub struct BatchCache<T> {
    batch: usize,
    acts: Vec<Vec<T>>,
}

impl<T: Real> BatchCache<T> {
    /// Output row of sample `b`.
    pub fn output(&self, b: usize) -> &[T] {
        let out = self.acts.last().map(Vec::as_slice).unwrap_or(&[]);
        let width = out.len() / self.batch.max(1);
        &out[b * width..(b + 1) * width]
    }
}

impl<T: Real> Mlp<T> {
    /// Forward pass over a batch; each weight row is reused across all samples.
    ///
    /// Outputs are bitwise equal to [`Mlp::forward`] on each input.
    pub fn forward_batch(&self, inputs: &[&[T]], cache: &mut BatchCache<T>) -> Result<()> {
        if let Some(x) = inputs.iter().find(|x| x.len() != self.input_len()) {
            return Err(Error::domain(format!("input has {} features, network expects {}", x.len(), self.input_len())));
        }
        let batch = inputs.len();
        cache.batch = batch;
        cache.acts.resize_with(self.layers.len() + 1, Vec::new);
        cache.acts[0].clear();
        for x in inputs {
            cache.acts[0].extend_from_slice(x);
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (prev, next) = cache.acts.split_at_mut(l + 1);
            let (input, out) = (&prev[l], &mut next[0]);
            out.resize(batch * layer.outputs, T::zero());
            for o in 0..layer.outputs {
                let row = layer.row(o);
                for b in 0..batch {
                    out[b * layer.outputs + o] = layer.bias[o] + dot(row, &input[b * layer.inputs..(b + 1) * layer.inputs]);
                }
            }
            if l != last {
                for v in out.iter_mut() {
                    *v = v.max(T::zero());
                }
            }
        }
        Ok(())
    }

    /// Adds `sum_b scales[b] * dQ(x_b, actions[b])/dtheta` into `grad`.
    fn accumulate_grad_batch(
        &self,
        cache: &BatchCache<T>,
        actions: &[usize],
        scales: &[T],
        grad: &mut Gradients<T>,
        delta: &mut Vec<T>,
        prev: &mut Vec<T>,
    ) {
        let n = self.layers.len();
        let batch = cache.batch;
        let width = self.layers[n - 1].outputs;
        delta.clear();
        delta.resize(batch * width, T::zero());
        for b in 0..batch {
            delta[b * width + actions[b]] = scales[b];
        }
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let (fan_in, fan_out) = (layer.inputs, layer.outputs);
            let input = &cache.acts[l];
            let g = &mut grad.layers[l];
            if l > 0 {
                prev.clear();
                prev.resize(batch * fan_in, T::zero());
            }
            for o in 0..fan_out {
                let row = layer.row(o);
                let grow = &mut g.weights[o * fan_in..(o + 1) * fan_in];
                for b in 0..batch {
                    let d = delta[b * fan_out + o];
                    if d == T::zero() {
                        continue;
                    }
                    g.bias[o] += d;
                    axpy(d, &input[b * fan_in..(b + 1) * fan_in], grow);
                    if l > 0 {
                        axpy(d, row, &mut prev[b * fan_in..(b + 1) * fan_in]);
                    }
                }
            }
            if l > 0 {
                for (p, &a) in prev.iter_mut().zip(input.iter()) {
                    if a <= T::zero() {
                        *p = T::zero();
                    }
                }
                std::mem::swap(delta, prev);
            }
        }
    }
}

/// Reusable buffers for [`Learner::update`].
#[derive(Debug, Clone)]
pub struct Learner<T> {
    grad: Gradients<T>,
    online: BatchCache<T>,
    target: BatchCache<T>,
    delta: Vec<T>,
    prev: Vec<T>,
}

impl<T: Real> Learner<T> {
    pub fn new(net: &Mlp<T>) -> Self {
        Self {
            grad: net.zeros_like(),
            online: BatchCache::default(),
            target: BatchCache::default(),
            delta: Vec::new(),
            prev: Vec::new(),
        }
    }

    /// Semi-gradient step `theta += lr * mean_i(w_i * TD_i * grad Q(s_i, a_i))`.
    ///
    /// Targets come from `target` (the online network itself when `None`).
    /// Fails with [`Error::Divergence`] on non-finite values.
    #[allow(clippy::too_many_arguments)]
    pub fn update<S: AsRef<[T]>>(
        &mut self,
        params: &mut Mlp<T>,
        target: Option<&Mlp<T>>,
        batch: &[&Experience<S, T>],
        is_weights: &[T],
        gamma: T,
        kind: TargetKind<T>,
        learning_rate: T,
    ) -> Result<MinibatchOutcome<T>> {
        if batch.is_empty() || batch.len() != is_weights.len() {
            return Err(Error::domain("minibatch must be nonempty with one weight per sample"));
        }
        if let Some(e) = batch.iter().find(|e| e.action >= params.action_count()) {
            return Err(Error::domain(format!("action {} out of range", e.action)));
        }
        let n = batch.len();
        let next: Vec<&[T]> = batch.iter().map(|e| e.next_state.as_ref()).collect();
        target.unwrap_or(params).forward_batch(&next, &mut self.target)?;
        let states: Vec<&[T]> = batch.iter().map(|e| e.state.as_ref()).collect();
        params.forward_batch(&states, &mut self.online)?;

        let mut out = MinibatchOutcome { tds: Vec::with_capacity(n), targets: Vec::with_capacity(n), rows: Vec::with_capacity(n) };
        let inv_b = T::one() / T::from_usize_lossy(n);
        let mut scales = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        for (b, (e, &w)) in batch.iter().zip(is_weights).enumerate() {
            let y = if e.terminal { e.reward } else { e.reward + gamma * kind.next_value(self.target.output(b)) };
            let row = self.online.output(b).to_vec();
            let td = y - row[e.action];
            if !td.is_finite() {
                return Err(Error::Divergence(format!("non-finite TD error {td}")));
            }
            scales.push(w * td * inv_b);
            actions.push(e.action);
            out.targets.push(y);
            out.tds.push(td);
            out.rows.push(row);
        }
        self.grad.fill_zero();
        params.accumulate_grad_batch(&self.online, &actions, &scales, &mut self.grad, &mut self.delta, &mut self.prev);
        if !self.grad.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        params.add_scaled(learning_rate, &self.grad);
        if !params.is_finite() {
            return Err(Error::Divergence("non-finite parameters after update".into()));
        }
        Ok(out)
    }
}

/// One-shot form of [`Learner::update`].
#[allow(clippy::too_many_arguments)]
pub fn sgd_minibatch_update<T: Real, S: AsRef<[T]>>(
    params: &mut Mlp<T>,
    target: Option<&Mlp<T>>,
    batch: &[&Experience<S, T>],
    is_weights: &[T],
    gamma: T,
    kind: TargetKind<T>,
    learning_rate: T,
) -> Result<MinibatchOutcome<T>> {
    let mut learner = Learner::new(params);
    learner.update(params, target, batch, is_weights, gamma, kind, learning_rate)
}

/// Row of action values after the virtual update: `row` with `row[action]` set to `target`.
pub fn virtual_row<T: Real>(row: &[T], action: usize, target: T) -> Vec<T> {
    let mut v = row.to_vec();
    v[action] = target;
    v
}

/// Value metrics of one experience from the network's row at `s_k` and its update target.
///
/// The post-update values are the virtual row, so the effective step size is 1.
pub fn metrics_from_row<T: Real>(row: &[T], action: usize, target: T, kind: TargetKind<T>) -> MetricRecord<T> {
    let new = virtual_row(row, action, target);
    let td = target - row[action];
    match kind {
        TargetKind::Max => MetricRecord::plain(row, &new, action, td, T::one(), Flavor::FaPlain),
        TargetKind::Soft(beta) => MetricRecord::soft(row, &new, action, td, beta, Flavor::FaSoft),
    }
}

/// Metrics for experience `e` against online parameters `params`, bootstrapping from `target`.
pub fn metrics_fa<T: Real, S: AsRef<[T]>>(
    params: &Mlp<T>,
    target: Option<&Mlp<T>>,
    e: &Experience<S, T>,
    gamma: T,
    kind: TargetKind<T>,
) -> Result<MetricRecord<T>> {
    let row = params.forward(e.state.as_ref())?;
    if e.action >= row.len() {
        return Err(Error::domain(format!("action {} out of range", e.action)));
    }
    let y = td_target(target.unwrap_or(params), e, gamma, kind)?;
    Ok(metrics_from_row(&row, e.action, y, kind))
}

/// `rho_max * |TD_soft|` from the online row and the soft update target.
///
/// `pi_old` is the softmax of the online row, `pi_new` that of the virtual row.
pub fn ver_raw_priority<T: Real>(row: &[T], action: usize, target: T, beta: Temperature<T>) -> T {
    let pi_old = softmax_vec(beta.get(), row)[action];
    let pi_new = softmax_vec(beta.get(), &virtual_row(row, action, target))[action];
    pi_old.max(pi_new) * (target - row[action]).abs()
}
