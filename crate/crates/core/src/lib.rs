//! Value metrics of individual experiences for tabular and neural Q-learning,
//! TD-error bounds on those metrics, and prioritized replay built on them.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

pub mod envs;
pub mod experiment;
pub mod error;
pub mod funcapprox;
pub mod metrics;
pub mod numerics;
pub mod replay;
pub mod scalar;
pub mod tabular;

pub use error::{Error, Result};
pub use scalar::Real;

pub type QTable64 = tabular::QTable<f64>;
pub type QTable32 = tabular::QTable<f32>;
pub type MetricRecord64 = metrics::MetricRecord<f64>;
pub type MetricRecord32 = metrics::MetricRecord<f32>;
pub type Mlp64 = funcapprox::Mlp<f64>;
pub type Mlp32 = funcapprox::Mlp<f32>;
pub type SumTree64 = replay::SumTree<f64>;
pub type SumTree32 = replay::SumTree<f32>;
pub type Temperature64 = numerics::Temperature<f64>;
