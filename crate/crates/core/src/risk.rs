//! Exponential-utility (entropic) risk: `(1/beta) * log E[exp(beta * C)]`.
//!
//! Interpolates between the mean as beta -> 0 and the worst case as
//! beta -> infinity. Estimators use max-subtracted log-sum-exp, so large
//! `beta * C` products cannot overflow.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{CrnBatch, DynamicsError, ModelEnsemble};
use crate::math::{logsumexp, weighted_logsumexp};
use crate::rng::Rng;
use crate::value::ValueFunction;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("risk aversion must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("risk estimate needs at least one sample")]
    EmptySamples,
    #[error("sample {index} is not finite: {value}")]
    NonFiniteSample { index: usize, value: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    /// Risk aversion; larger weights the tails more heavily.
    pub beta: f64,
    /// Monte-Carlo sample count for one-step successor estimates.
    pub samples: usize,
}

impl RiskParams {
    pub fn new(beta: f64, samples: usize) -> Result<Self, RiskError> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(RiskError::InvalidBeta(beta));
        }
        Ok(Self {
            beta,
            samples: samples.max(1),
        })
    }
}

impl Default for RiskParams {
    fn default() -> Self {
        Self {
            beta: 0.05,
            samples: 100,
        }
    }
}

fn check_samples(samples: &[f64]) -> Result<(), RiskError> {
    if samples.is_empty() {
        return Err(RiskError::EmptySamples);
    }
    for (index, &value) in samples.iter().enumerate() {
        if !value.is_finite() {
            return Err(RiskError::NonFiniteSample { index, value });
        }
    }
    Ok(())
}

/// Risk of an empirical sample under equal weights:
/// `(1/beta) * (logsumexp(beta * s) - log m)`.
pub fn risk_of_samples(samples: &[f64], beta: f64) -> Result<f64, RiskError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(RiskError::InvalidBeta(beta));
    }
    check_samples(samples)?;
    let scaled: Vec<f64> = samples.iter().map(|s| beta * s).collect();
    Ok((logsumexp(&scaled) - (samples.len() as f64).ln()) / beta)
}

/// Risk of a finite distribution given as (value, probability) pairs.
pub fn risk_of_weighted(pairs: &[(f64, f64)], beta: f64) -> Result<f64, RiskError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(RiskError::InvalidBeta(beta));
    }
    if pairs.is_empty() {
        return Err(RiskError::EmptySamples);
    }
    for (index, &(value, _)) in pairs.iter().enumerate() {
        if !value.is_finite() {
            return Err(RiskError::NonFiniteSample { index, value });
        }
    }
    let scaled: Vec<(f64, f64)> = pairs.iter().map(|&(v, w)| (beta * v, w)).collect();
    Ok(weighted_logsumexp(&scaled) / beta)
}

/// One-step successor values at (x, u): V evaluated on `m` sampled next
/// states, or on the exact successor mixture when the ensemble enumerates.
#[derive(Debug, Clone, PartialEq)]
pub enum SuccessorValues {
    Sampled(Vec<f64>),
    Exact(Vec<(f64, f64)>),
}

impl SuccessorValues {
    pub fn risk(&self, beta: f64) -> Result<f64, RiskError> {
        match self {
            SuccessorValues::Sampled(vals) => risk_of_samples(vals, beta),
            SuccessorValues::Exact(pairs) => risk_of_weighted(pairs, beta),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            SuccessorValues::Sampled(vals) => {
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            }
            SuccessorValues::Exact(pairs) => pairs.iter().map(|(v, w)| v * w).sum(),
        }
    }

    /// Probability mass (or empirical frequency) of values >= threshold.
    pub fn tail_mass(&self, threshold: f64) -> f64 {
        match self {
            SuccessorValues::Sampled(vals) => {
                vals.iter().filter(|v| **v >= threshold).count() as f64
                    / vals.len().max(1) as f64
            }
            SuccessorValues::Exact(pairs) => pairs
                .iter()
                .filter(|(v, _)| *v >= threshold)
                .map(|(_, w)| w)
                .sum(),
        }
    }
}

/// Collects successor values of V at (x, u) by replaying a common-random-
/// numbers batch, so comparisons across candidate controls are noise-free.
pub fn successor_values_crn(
    ens: &ModelEnsemble,
    batch: &CrnBatch,
    x: &[f64],
    u: &[f64],
    v: &ValueFunction,
) -> Result<SuccessorValues, RiskError> {
    let mut buf = Vec::new();
    let states = ens.next_states_with(batch, x, u)?;
    Ok(SuccessorValues::Sampled(
        states
            .iter()
            .map(|s| v.evaluate_clamped(s, &mut buf))
            .collect(),
    ))
}

/// Exact successor values when every ensemble member enumerates.
pub fn successor_values_exact(
    ens: &ModelEnsemble,
    x: &[f64],
    u: &[f64],
    v: &ValueFunction,
) -> Result<Option<SuccessorValues>, RiskError> {
    let mut buf = Vec::new();
    Ok(ens.exact_mixture_successors(x, u)?.map(|list| {
        SuccessorValues::Exact(
            list.iter()
                .map(|(s, p)| (v.evaluate_clamped(s, &mut buf), *p))
                .collect(),
        )
    }))
}

/// Risk of the next-state value at (x, u): exact where the ensemble
/// enumerates, Monte-Carlo with `rp.samples` draws otherwise.
pub fn risk_next_value(
    ens: &ModelEnsemble,
    x: &[f64],
    u: &[f64],
    v: &ValueFunction,
    rp: &RiskParams,
    rng: &mut Rng,
) -> Result<f64, RiskError> {
    if let Some(exact) = successor_values_exact(ens, x, u, v)? {
        return exact.risk(rp.beta);
    }
    let batch = ens.draw_crn(rp.samples, rng);
    successor_values_crn(ens, &batch, x, u, v)?.risk(rp.beta)
}
