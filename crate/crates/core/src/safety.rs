//! Safe-set encodings, immediate cost functions, and the feasibility
//! conditions linking the cost threshold to the value-envelope constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::BoxBounds;
use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("discount factor {0} outside (0, 1)")]
    InvalidGamma(f64),
    #[error("cost threshold must be positive, got {0}")]
    InvalidCostThreshold(f64),
    #[error("theta constants invalid: {0}")]
    InvalidTheta(String),
    #[error("sampler produced no unsafe states")]
    EmptyUnsafeSample,
    #[error(
        "theta1 too close to 1/(1-gamma): theta1*(gamma-1)+1 = {denom} is not positive"
    )]
    DegenerateDenominator { denom: f64 },
}

/// Closed-form safe-set membership tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SafeSetForm {
    /// |x[index]| <= bound
    AbsBound { index: usize, bound: f64 },
    /// x[index] <= bound
    UpperBound { index: usize, bound: f64 },
    /// Per-state mask for integer-coded finite state spaces.
    Mask { safe: Vec<bool> },
    /// Membership in an axis-aligned box.
    Box { bounds: BoxBounds },
}

impl SafeSetForm {
    pub fn is_safe(&self, x: &[f64]) -> bool {
        match self {
            SafeSetForm::AbsBound { index, bound } => x[*index].abs() <= *bound,
            SafeSetForm::UpperBound { index, bound } => x[*index] <= *bound,
            SafeSetForm::Mask { safe } => {
                let i = x[0].round() as usize;
                i < safe.len() && safe[i]
            }
            SafeSetForm::Box { bounds } => bounds.contains(x, 0.0),
        }
    }
}

/// Closed-form immediate cost families. All are nonnegative by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostForm {
    /// max(0, w · x + offset)
    Hinge { weights: Vec<f64>, offset: f64 },
    /// max(0, |x[index]| - threshold)
    AbsHinge { index: usize, threshold: f64 },
    /// scale * 1[x unsafe]
    Indicator { scale: f64 },
    /// sum(w_i * x_i^2)
    Quadratic { weights: Vec<f64> },
    /// Per-state values for integer-coded finite state spaces.
    Table { values: Vec<f64> },
}

/// Safe/unsafe partition plus the cost machinery driving safety values:
/// immediate cost `c`, threshold `c_hat` with `c(x) >= c_hat` on the unsafe
/// set, and discount `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySpec {
    pub safe_set: SafeSetForm,
    pub cost: CostForm,
    pub c_hat: f64,
    pub gamma: f64,
}

impl SafetySpec {
    pub fn new(
        safe_set: SafeSetForm,
        cost: CostForm,
        c_hat: f64,
        gamma: f64,
    ) -> Result<Self, SafetyError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(SafetyError::InvalidGamma(gamma));
        }
        if !(c_hat > 0.0) {
            return Err(SafetyError::InvalidCostThreshold(c_hat));
        }
        Ok(Self {
            safe_set,
            cost,
            c_hat,
            gamma,
        })
    }

    pub fn is_safe(&self, x: &[f64]) -> bool {
        self.safe_set.is_safe(x)
    }

    pub fn cost(&self, x: &[f64]) -> f64 {
        match &self.cost {
            CostForm::Hinge { weights, offset } => {
                let v: f64 = weights.iter().zip(x).map(|(w, xi)| w * xi).sum();
                (v + offset).max(0.0)
            }
            CostForm::AbsHinge { index, threshold } => (x[*index].abs() - threshold).max(0.0),
            CostForm::Indicator { scale } => {
                if self.is_safe(x) {
                    0.0
                } else {
                    *scale
                }
            }
            CostForm::Quadratic { weights } => {
                weights.iter().zip(x).map(|(w, xi)| w * xi * xi).sum()
            }
            CostForm::Table { values } => {
                let i = (x[0].round() as usize).min(values.len().saturating_sub(1));
                values[i]
            }
        }
    }
}

/// Envelope constants: `V(x) <= theta1*c(x) + theta2` for some policy and
/// `V(x) >= theta3*c(x) + theta4` for all policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaConstants {
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    pub theta4: f64,
}

impl ThetaConstants {
    pub fn new(theta1: f64, theta2: f64, theta3: f64, theta4: f64) -> Result<Self, SafetyError> {
        if !(theta1 > 0.0) || !(theta2 >= 0.0) {
            return Err(SafetyError::InvalidTheta(format!(
                "theta1 must be positive and theta2 nonnegative, got ({theta1}, {theta2})"
            )));
        }
        if !(theta3 >= 0.0) || !(theta4 >= 0.0) {
            return Err(SafetyError::InvalidTheta(format!(
                "theta3/theta4 must be nonnegative, got ({theta3}, {theta4})"
            )));
        }
        Ok(Self {
            theta1,
            theta2,
            theta3,
            theta4,
        })
    }

    /// The trivial lower envelope: V >= c always holds for nonnegative costs.
    pub fn trivial_lower(theta1: f64, theta2: f64) -> Result<Self, SafetyError> {
        Self::new(theta1, theta2, 1.0, 0.0)
    }

    pub fn check_theta1(&self, gamma: f64) -> Result<(), SafetyError> {
        if self.theta1 >= 1.0 / (1.0 - gamma) {
            return Err(SafetyError::InvalidTheta(format!(
                "theta1 = {} must be below 1/(1-gamma) = {}",
                self.theta1,
                1.0 / (1.0 - gamma)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub ok: bool,
    pub min_unsafe_cost: f64,
    pub witness: Vec<f64>,
    pub samples: usize,
}

/// Checks `c(x) >= c_hat` over explicitly provided unsafe states.
pub fn validate_cost_threshold_on(
    spec: &SafetySpec,
    unsafe_states: &[Vec<f64>],
) -> Result<ThresholdReport, SafetyError> {
    let mut min_cost = f64::INFINITY;
    let mut witness = Vec::new();
    let mut count = 0usize;
    for x in unsafe_states {
        if spec.is_safe(x) {
            continue;
        }
        count += 1;
        let c = spec.cost(x);
        if c < min_cost {
            min_cost = c;
            witness = x.clone();
        }
    }
    if count == 0 {
        return Err(SafetyError::EmptyUnsafeSample);
    }
    Ok(ThresholdReport {
        ok: min_cost >= spec.c_hat,
        min_unsafe_cost: min_cost,
        witness,
        samples: count,
    })
}

/// Checks `c(x) >= c_hat` on up to `n` unsafe states rejection-sampled
/// uniformly from `sample_box`.
pub fn validate_cost_threshold(
    spec: &SafetySpec,
    sample_box: &BoxBounds,
    n: usize,
    rng: &mut Rng,
) -> Result<ThresholdReport, SafetyError> {
    let mut states = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let max_attempts = n.saturating_mul(50).max(1000);
    while states.len() < n && attempts < max_attempts {
        attempts += 1;
        let x = sample_box.sample_uniform(rng);
        if !spec.is_safe(&x) {
            states.push(x);
        }
    }
    validate_cost_threshold_on(spec, &states)
}

/// Smallest admissible cost threshold implied by the envelope constants:
/// `theta2 / (theta3 * (theta1*(gamma-1) + 1)) - theta4 / theta3`.
///
/// The denominator is evaluated as `theta1*gamma - theta1 + 1` so that
/// benign constant choices stay exact in floating point.
pub fn cost_threshold_lower_bound(th: &ThetaConstants, gamma: f64) -> Result<f64, SafetyError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(SafetyError::InvalidGamma(gamma));
    }
    if !(th.theta3 > 0.0) {
        return Err(SafetyError::InvalidTheta(
            "theta3 must be positive for the threshold bound".into(),
        ));
    }
    let denom = th.theta1 * gamma - th.theta1 + 1.0;
    if denom <= 0.0 {
        return Err(SafetyError::DegenerateDenominator { denom });
    }
    Ok(th.theta2 / (th.theta3 * denom) - th.theta4 / th.theta3)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub upper_ok: bool,
    pub lower_ok: bool,
    /// max over samples of V - (theta1*c + theta2)
    pub worst_upper_gap: f64,
    /// max over samples of (theta3*c + theta4) - V
    pub worst_lower_gap: f64,
    pub worst_upper_state: Vec<f64>,
    pub worst_lower_state: Vec<f64>,
}

/// Checks both value envelopes on a state sample, given V evaluated by the
/// caller (keeps this module independent of the value representation).
pub fn check_value_envelopes(
    th: &ThetaConstants,
    spec: &SafetySpec,
    states: &[Vec<f64>],
    mut value: impl FnMut(&[f64]) -> f64,
) -> EnvelopeReport {
    let mut report = EnvelopeReport {
        upper_ok: true,
        lower_ok: true,
        worst_upper_gap: f64::NEG_INFINITY,
        worst_lower_gap: f64::NEG_INFINITY,
        worst_upper_state: Vec::new(),
        worst_lower_state: Vec::new(),
    };
    for x in states {
        let v = value(x);
        let c = spec.cost(x);
        let upper_gap = v - (th.theta1 * c + th.theta2);
        let lower_gap = (th.theta3 * c + th.theta4) - v;
        if upper_gap > report.worst_upper_gap {
            report.worst_upper_gap = upper_gap;
            report.worst_upper_state = x.clone();
        }
        if lower_gap > report.worst_lower_gap {
            report.worst_lower_gap = lower_gap;
            report.worst_lower_state = x.clone();
        }
    }
    report.upper_ok = report.worst_upper_gap <= 0.0;
    report.lower_ok = report.worst_lower_gap <= 0.0;
    report
}

/// Fits envelope constants to (V, c) pairs by linear scan: theta2 absorbs the
/// value level where the cost vanishes, theta1 covers the worst V/c ratio.
/// Returns None when no theta1 below 1/(1-gamma) works.
pub fn fit_theta_constants(points: &[(f64, f64)], gamma: f64) -> Option<ThetaConstants> {
    const EPS: f64 = 1e-12;
    let theta2 = points
        .iter()
        .filter(|(_, c)| *c <= EPS)
        .map(|(v, _)| *v)
        .fold(0.0f64, f64::max);
    let mut theta1 = 0.0f64;
    for &(v, c) in points.iter().filter(|(_, c)| *c > EPS) {
        theta1 = theta1.max((v - theta2) / c);
    }
    let theta1 = theta1.max(EPS) * (1.0 + 1e-9);
    if theta1 >= 1.0 / (1.0 - gamma) {
        return None;
    }
    Some(ThetaConstants {
        theta1,
        theta2: theta2 * (1.0 + 1e-9) + EPS,
        theta3: 1.0,
        theta4: 0.0,
    })
}
