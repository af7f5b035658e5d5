//! Stable log-sum-exp, temperature softmax, deterministic argmax and seeded RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Entropy coefficient of maximum-entropy RL. Always finite and strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature<T>(T);

impl<T: Real> Temperature<T> {
    pub fn new(beta: T) -> Result<Self> {
        if beta.is_finite() && beta > T::zero() {
            Ok(Self(beta))
        } else {
            Err(Error::domain(format!("temperature must be finite and > 0, got {beta}")))
        }
    }

    #[inline]
    pub fn get(self) -> T {
        self.0
    }
}

/// `beta * ln(sum_i exp(v_i / beta))`, evaluated with the maximum factored out.
pub fn logsumexp<T: Real>(beta: Temperature<T>, values: &[T]) -> Result<T> {
    check_finite(values)?;
    Ok(lse(beta.get(), values))
}

/// Softmax of `values / beta`. Entries are nonnegative and sum to one.
pub fn softmax<T: Real>(beta: Temperature<T>, values: &[T]) -> Result<Vec<T>> {
    check_finite(values)?;
    let mut out = vec![T::zero(); values.len()];
    softmax_into(beta.get(), values, &mut out);
    Ok(out)
}

/// Lowest index attaining the maximum.
pub fn argmax_tiebreak<T: Real>(values: &[T]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::domain("argmax of empty vector"));
    }
    Ok(argmax(values))
}

fn check_finite<T: Real>(values: &[T]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::domain("empty vector"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("non-finite entry {v}")));
    }
    Ok(())
}

// Unchecked kernels below assume a nonempty slice; callers in this crate
// only pass table rows and network outputs, which always have >= 1 action.

#[inline]
pub(crate) fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub(crate) fn max_of<T: Real>(values: &[T]) -> T {
    values[argmax(values)]
}

#[inline]
pub(crate) fn lse<T: Real>(beta: T, values: &[T]) -> T {
    let m = max_of(values);
    let s: T = values.iter().map(|&v| ((v - m) / beta).exp()).sum();
    m + beta * s.ln()
}

#[inline]
pub(crate) fn softmax_into<T: Real>(beta: T, values: &[T], out: &mut [T]) {
    let m = max_of(values);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(values) {
        *o = ((v - m) / beta).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn softmax_vec<T: Real>(beta: T, values: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); values.len()];
    softmax_into(beta, values, &mut out);
    out
}

/// Root seed of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

/// Independent random streams derived from one [`RngSeed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Env = 1,
    Action = 2,
    Replay = 3,
    Init = 4,
    Eval = 5,
}

impl RngSeed {
    /// ChaCha8 generator keyed by the seed, on the stream reserved for `which`.
    pub fn stream(self, which: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(which as u64);
        rng
    }
}
