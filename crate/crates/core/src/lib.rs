//! Risk-sensitive safety filtering for stochastic discrete-time systems
//! under model uncertainty.
//!
//! The crate learns safety value functions over a model ensemble, certifies
//! probabilistic constraint satisfaction through an exponential-utility risk
//! condition, and minimally adjusts a nominal policy online so the filtered
//! closed loop keeps its certified safety probability.

pub mod dynamics;
pub mod grid;
pub mod math;
pub mod policy;
pub mod risk;
pub mod rng;
pub mod safety;
pub mod value;
