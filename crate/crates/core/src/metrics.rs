//! Value metrics of experience (EVB, PIV, EIV) for Q-learning and soft Q-learning,
//! and the TD-error bounds they obey.
//!
//! Every metric is a function of the action-value row of the updated state before
//! (`old`) and after (`new`) the update. Table-level wrappers pick the row out of a
//! [`QTable`]; the function-approximation path builds the `new` row from the update
//! target instead of post-gradient parameters.
//!
//! Plain Q-learning (greedy policy improvement):
//!
//! * `EVB = max_a new[a] - max_a old[a]`
//! * `PIV = max_a new[a] - new[a_old]`, with `a_old = argmax old`
//! * `EIV = new[a_old] - old[a_old]`
//!
//! Soft Q-learning with `pi = softmax(row / beta)` and entropy `H`:
//!
//! * `EVB = V_soft(new) - V_soft(old)`
//! * `PIV = sum_a (pi_new - pi_old)[a] * new[a] + beta * (H(pi_new) - H(pi_old))`
//! * `EIV = sum_a pi_old[a] * (new[a] - old[a])`
//!
//! Bounds: `|EVB|, |PIV|, |EIV| <= alpha |TD|` for Q-learning; for soft Q-learning
//! `rho_min |TD| <= |EVB|, |EIV|` and `|EVB|, |PIV|, |EIV| <= rho_max |TD|`, where
//! `rho_*` are the min/max of `pi_old(a_k)` and `pi_new(a_k)`.

use serde::{Deserialize, Serialize};

use crate::envs::Experience;
use crate::error::{Error, Result};
use crate::numerics::{argmax, lse, max_of, softmax_vec, Temperature};
use crate::scalar::Real;
use crate::tabular::{soft_td_error, td_error, QTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Plain,
    Soft,
    FaPlain,
    FaSoft,
}

impl Flavor {
    pub fn is_soft(self) -> bool {
        matches!(self, Flavor::Soft | Flavor::FaSoft)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::Plain => "plain",
            Flavor::Soft => "soft",
            Flavor::FaPlain => "fa_plain",
            Flavor::FaSoft => "fa_soft",
        }
    }
}

impl std::str::FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Flavor::Plain),
            "soft" => Ok(Flavor::Soft),
            "fa_plain" => Ok(Flavor::FaPlain),
            "fa_soft" => Ok(Flavor::FaSoft),
            other => Err(Error::domain(format!("unknown flavor {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Row-level metrics

pub fn evb_q_row<T: Real>(old: &[T], new: &[T]) -> T {
    max_of(new) - max_of(old)
}

pub fn piv_q_row<T: Real>(old: &[T], new: &[T]) -> T {
    max_of(new) - new[argmax(old)]
}

pub fn eiv_q_row<T: Real>(old: &[T], new: &[T]) -> T {
    let a_old = argmax(old);
    new[a_old] - old[a_old]
}

pub fn evb_soft_row<T: Real>(old: &[T], new: &[T], beta: Temperature<T>) -> T {
    lse(beta.get(), new) - lse(beta.get(), old)
}

/// Expanded soft EVB: `sum pi_new (new - beta ln pi_new) - sum pi_old (old - beta ln pi_old)`.
///
/// Evaluates the entropy-augmented expectation term by term from the policy
/// probabilities, independently of the log-sum-exp shortcut.
pub fn evb_soft_definitional<T: Real>(old: &[T], new: &[T], beta: Temperature<T>) -> T {
    let augmented = |row: &[T]| {
        let pi = softmax_vec(beta.get(), row);
        row.iter()
            .zip(&pi)
            .filter(|(_, p)| **p > T::zero())
            .map(|(&q, &p)| p * (q - beta.get() * p.ln()))
            .sum::<T>()
    };
    augmented(new) - augmented(old)
}

fn entropy<T: Real>(pi: &[T]) -> T {
    -pi.iter().filter(|p| **p > T::zero()).map(|&p| p * p.ln()).sum::<T>()
}

pub fn piv_soft_row<T: Real>(old: &[T], new: &[T], beta: Temperature<T>) -> T {
    let pi_old = softmax_vec(beta.get(), old);
    let pi_new = softmax_vec(beta.get(), new);
    let shift: T = pi_new.iter().zip(&pi_old).zip(new).map(|((&pn, &po), &q)| (pn - po) * q).sum();
    shift + beta.get() * (entropy(&pi_new) - entropy(&pi_old))
}

pub fn eiv_soft_row<T: Real>(old: &[T], new: &[T], beta: Temperature<T>) -> T {
    let pi_old = softmax_vec(beta.get(), old);
    pi_old.iter().zip(new.iter().zip(old)).map(|(&p, (&n, &o))| p * (n - o)).sum()
}

// ---------------------------------------------------------------------------
// Table-level wrappers

fn rows<'a, T: Real>(q_old: &'a QTable<T>, q_new: &'a QTable<T>, state: usize) -> Result<(&'a [T], &'a [T])> {
    if q_old.state_count() != q_new.state_count() || q_old.action_count() != q_new.action_count() {
        return Err(Error::domain("q-tables differ in shape"));
    }
    if state >= q_old.state_count() {
        return Err(Error::domain(format!("state {state} out of range")));
    }
    Ok((q_old.row(state), q_new.row(state)))
}

pub fn evb_q<T: Real>(q_old: &QTable<T>, q_new: &QTable<T>, state: usize) -> Result<T> {
    let (o, n) = rows(q_old, q_new, state)?;
    Ok(evb_q_row(o, n))
}

pub fn piv_q<T: Real>(q_old: &QTable<T>, q_new: &QTable<T>, state: usize) -> Result<T> {
    let (o, n) = rows(q_old, q_new, state)?;
    Ok(piv_q_row(o, n))
}

pub fn eiv_q<T: Real>(q_old: &QTable<T>, q_new: &QTable<T>, state: usize) -> Result<T> {
    let (o, n) = rows(q_old, q_new, state)?;
    Ok(eiv_q_row(o, n))
}

pub fn evb_soft<T: Real>(q_old: &QTable<T>, q_new: &QTable<T>, state: usize, beta: Temperature<T>) -> Result<T> {
    let (o, n) = rows(q_old, q_new, state)?;
    Ok(evb_soft_row(o, n, beta))
}

pub fn piv_soft<T: Real>(q_old: &QTable<T>, q_new: &QTable<T>, state: usize, beta: Temperature<T>) -> Result<T> {
    let (o, n) = rows(q_old, q_new, state)?;
    Ok(piv_soft_row(o, n, beta))
}

pub fn eiv_soft<T: Real>(q_old: &QTable<T>, q_new: &QTable<T>, state: usize, beta: Temperature<T>) -> Result<T> {
    let (o, n) = rows(q_old, q_new, state)?;
    Ok(eiv_soft_row(o, n, beta))
}

// ---------------------------------------------------------------------------
// Bounds

/// `alpha * |td|`.
pub fn bound_q<T: Real>(td: T, alpha: T) -> T {
    alpha * td.abs()
}

/// `(rho_min * |td|, rho_max * |td|)` from the old and new policy probabilities of the experienced action.
pub fn bounds_soft<T: Real>(td: T, pi_old_ak: T, pi_new_ak: T) -> Result<(T, T)> {
    let unit = |p: T| p >= T::zero() && p <= T::one();
    if !unit(pi_old_ak) || !unit(pi_new_ak) {
        return Err(Error::domain(format!("probabilities must lie in [0,1], got {pi_old_ak}, {pi_new_ak}")));
    }
    let a = td.abs();
    Ok((pi_old_ak.min(pi_new_ak) * a, pi_old_ak.max(pi_new_ak) * a))
}

// ---------------------------------------------------------------------------
// Records

/// Everything logged about one update.
///
/// For plain flavors `rho_max`/`rho_min` hold the greedy-policy probabilities
/// (0 or 1) of the experienced action and `lower_bound` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord<T> {
    pub td: T,
    pub evb: T,
    pub piv: T,
    pub eiv: T,
    pub rho_max: T,
    pub rho_min: T,
    pub upper_bound: T,
    pub lower_bound: T,
    pub flavor: Flavor,
}

/// Which guarantee a failed check belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Guarantee {
    /// Q-learning: metrics bounded above by `alpha |TD|`.
    QUpper,
    /// Soft Q-learning: metrics bounded above by `rho_max |TD|`.
    SoftUpper,
    /// Soft Q-learning: EVB and EIV bounded below by `rho_min |TD|`.
    SoftLower,
    /// `evb = piv + eiv` and `piv >= 0`.
    Identity,
}

impl Guarantee {
    pub const ALL: [Guarantee; 4] = [Guarantee::QUpper, Guarantee::SoftUpper, Guarantee::SoftLower, Guarantee::Identity];

    pub fn label(self) -> &'static str {
        match self {
            Guarantee::QUpper => "q_upper",
            Guarantee::SoftUpper => "soft_upper",
            Guarantee::SoftLower => "soft_lower",
            Guarantee::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation<T> {
    pub guarantee: Guarantee,
    pub what: &'static str,
    /// Amount by which the inequality fails, before tolerance.
    pub excess: T,
}

/// Update rule a record describes, with the constants needed to recompute its TD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricParams<T> {
    Plain { alpha: T, gamma: T },
    Soft { beta: Temperature<T>, gamma: T },
}

impl<T: Real> MetricRecord<T> {
    /// Record for a Q-learning update that moved `old[action]` by `alpha * td`.
    pub fn plain(old: &[T], new: &[T], action: usize, td: T, alpha: T, flavor: Flavor) -> Self {
        let greedy = |row: &[T]| if argmax(row) == action { T::one() } else { T::zero() };
        let (g_old, g_new) = (greedy(old), greedy(new));
        Self {
            td,
            evb: evb_q_row(old, new),
            piv: piv_q_row(old, new),
            eiv: eiv_q_row(old, new),
            rho_max: g_old.max(g_new),
            rho_min: g_old.min(g_new),
            upper_bound: bound_q(td, alpha),
            lower_bound: T::zero(),
            flavor,
        }
    }

    /// Record for a soft Q-learning update that replaced `old[action]` by its target.
    pub fn soft(old: &[T], new: &[T], action: usize, td: T, beta: Temperature<T>, flavor: Flavor) -> Self {
        let p_old = softmax_vec(beta.get(), old)[action];
        let p_new = softmax_vec(beta.get(), new)[action];
        let (rho_min, rho_max) = (p_old.min(p_new), p_old.max(p_new));
        Self {
            td,
            evb: evb_soft_row(old, new, beta),
            piv: piv_soft_row(old, new, beta),
            eiv: eiv_soft_row(old, new, beta),
            rho_max,
            rho_min,
            upper_bound: rho_max * td.abs(),
            lower_bound: rho_min * td.abs(),
            flavor,
        }
    }

    /// All invariant failures beyond `tol`.
    pub fn violations(&self, tol: T) -> Vec<Violation<T>> {
        let mut out = Vec::new();
        let fields = [self.td, self.evb, self.piv, self.eiv, self.rho_max, self.rho_min, self.upper_bound, self.lower_bound];
        if fields.iter().any(|v| !v.is_finite()) {
            out.push(Violation { guarantee: Guarantee::Identity, what: "non-finite field", excess: T::infinity() });
            return out;
        }
        let upper = if self.flavor.is_soft() { Guarantee::SoftUpper } else { Guarantee::QUpper };
        let mut check = |guarantee, what, excess: T| {
            if excess > tol {
                out.push(Violation { guarantee, what, excess });
            }
        };
        check(upper, "|evb| > upper", self.evb.abs() - self.upper_bound);
        check(upper, "|piv| > upper", self.piv.abs() - self.upper_bound);
        check(upper, "|eiv| > upper", self.eiv.abs() - self.upper_bound);
        if self.flavor.is_soft() {
            check(Guarantee::SoftLower, "|evb| < lower", self.lower_bound - self.evb.abs());
            check(Guarantee::SoftLower, "|eiv| < lower", self.lower_bound - self.eiv.abs());
        }
        check(Guarantee::Identity, "piv < 0", -self.piv);
        check(Guarantee::Identity, "evb != piv + eiv", (self.evb - self.piv - self.eiv).abs());
        out
    }

    pub fn is_clean(&self, tol: T) -> bool {
        self.violations(tol).is_empty()
    }
}

/// Record for a tabular update, recomputing the TD error from `q_old`.
///
/// `q_new` must be the table produced by applying the matching update to `e`.
pub fn metric_record_tabular<T: Real>(
    q_old: &QTable<T>,
    q_new: &QTable<T>,
    e: &Experience<usize, T>,
    params: MetricParams<T>,
) -> Result<MetricRecord<T>> {
    let (old, new) = rows(q_old, q_new, e.state)?;
    Ok(match params {
        MetricParams::Plain { alpha, gamma } => {
            let td = td_error(q_old, e, gamma)?;
            MetricRecord::plain(old, new, e.action, td, alpha, Flavor::Plain)
        }
        MetricParams::Soft { beta, gamma } => {
            let td = soft_td_error(q_old, e, beta, gamma)?;
            MetricRecord::soft(old, new, e.action, td, beta, Flavor::Soft)
        }
    })
}
