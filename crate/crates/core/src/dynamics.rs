//! Stochastic discrete-time systems, model ensembles, and rollouts.
//!
//! A system steps as `x+ = f(x, u, w)` with `w` drawn from a zero-mean noise
//! law. Model uncertainty is carried by a finite weighted ensemble of systems
//! sharing one transition family but differing in parameters.

use std::ops::Deref;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::BoxBounds;
use crate::rng::Rng;
use crate::safety::SafetySpec;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("transition produced a non-finite state (member {member})")]
    NonFiniteTransition { member: usize },
    #[error("ensemble must contain at least one member")]
    EmptyEnsemble,
    #[error("member weights invalid: {0}")]
    BadWeights(String),
    #[error("system '{name}' invalid: {reason}")]
    BadSystem { name: String, reason: String },
    #[error("ensemble members disagree on family or dimensions")]
    MixedMembers,
    #[error("transition tensor row (state {state}, action {action}) sums to {sum}, expected 1")]
    BadTransitionRow { state: usize, action: usize, sum: f64 },
    #[error("unsupported file version {0}")]
    UnsupportedVersion(u32),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVec(pub Vec<f64>);

impl StateVec {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for StateVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for StateVec {
    fn from(v: Vec<f64>) -> Self {
        StateVec(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVec(pub Vec<f64>);

impl ControlVec {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl Deref for ControlVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ControlVec {
    fn from(v: Vec<f64>) -> Self {
        ControlVec(v)
    }
}

/// Optional state-dependent noise scaling: multiplier `max(0, bias + w·|x|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateScale {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl StateScale {
    fn multiplier(&self, x: &[f64]) -> f64 {
        let s: f64 = self
            .weights
            .iter()
            .zip(x)
            .map(|(w, xi)| w * xi.abs())
            .sum();
        (self.bias + s).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    /// Independent zero-mean Gaussians with per-coordinate sigma.
    GaussianDiagonal { sigmas: Vec<f64> },
    /// Uniform on the symmetric box [-h, h] per coordinate.
    UniformBox { half_widths: Vec<f64> },
    /// Identically zero.
    Degenerate { dim: usize },
}

/// Zero-mean process-noise law. `draw_unit` produces standardized draws so a
/// single batch can be rescaled per state and reused across candidate
/// controls (common random numbers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_scale: Option<StateScale>,
}

impl NoiseSpec {
    pub fn gaussian(sigmas: Vec<f64>) -> Self {
        Self {
            kind: NoiseKind::GaussianDiagonal { sigmas },
            state_scale: None,
        }
    }

    pub fn uniform(half_widths: Vec<f64>) -> Self {
        Self {
            kind: NoiseKind::UniformBox { half_widths },
            state_scale: None,
        }
    }

    pub fn degenerate(dim: usize) -> Self {
        Self {
            kind: NoiseKind::Degenerate { dim },
            state_scale: None,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            NoiseKind::GaussianDiagonal { sigmas } => sigmas.len(),
            NoiseKind::UniformBox { half_widths } => half_widths.len(),
            NoiseKind::Degenerate { dim } => *dim,
        }
    }

    pub fn scales(&self) -> &[f64] {
        match &self.kind {
            NoiseKind::GaussianDiagonal { sigmas } => sigmas,
            NoiseKind::UniformBox { half_widths } => half_widths,
            NoiseKind::Degenerate { .. } => &[],
        }
    }

    /// True when every realization is exactly zero.
    pub fn is_deterministic(&self) -> bool {
        match &self.kind {
            NoiseKind::Degenerate { .. } => true,
            NoiseKind::GaussianDiagonal { sigmas } => sigmas.iter().all(|s| *s == 0.0),
            NoiseKind::UniformBox { half_widths } => half_widths.iter().all(|h| *h == 0.0),
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.scales().iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err("noise scales must be finite and nonnegative".into());
        }
        Ok(())
    }

    /// Standardized draw: N(0,1) per coordinate for Gaussian noise, U[-1,1)
    /// for uniform noise, zeros when degenerate.
    pub fn draw_unit(&self, rng: &mut Rng) -> Vec<f64> {
        match &self.kind {
            NoiseKind::GaussianDiagonal { sigmas } => {
                (0..sigmas.len()).map(|_| rng.sample(StandardNormal)).collect()
            }
            NoiseKind::UniformBox { half_widths } => (0..half_widths.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            NoiseKind::Degenerate { dim } => vec![0.0; *dim],
        }
    }

    /// Rescales a standardized draw into an actual noise realization at `x`.
    pub fn materialize(&self, x: &[f64], unit: &[f64]) -> Vec<f64> {
        let m = self
            .state_scale
            .as_ref()
            .map(|s| s.multiplier(x))
            .unwrap_or(1.0);
        match &self.kind {
            NoiseKind::Degenerate { dim } => vec![0.0; *dim],
            _ => self
                .scales()
                .iter()
                .zip(unit)
                .map(|(s, z)| s * m * z)
                .collect(),
        }
    }

    pub fn sample(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        let unit = self.draw_unit(rng);
        self.materialize(x, &unit)
    }
}

/// Finite Markov decision process with an explicit transition tensor,
/// integer-coded as scalars so it plugs into the generic machinery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major [state][action][next_state].
    pub transitions: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
    ) -> Result<Self, DynamicsError> {
        let mdp = Self {
            n_states,
            n_actions,
            transitions,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        assert_eq!(
            self.transitions.len(),
            self.n_states * self.n_actions * self.n_states,
            "transition tensor size mismatch"
        );
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.row(s, a);
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 || row.iter().any(|p| *p < 0.0) {
                    return Err(DynamicsError::BadTransitionRow {
                        state: s,
                        action: a,
                        sum,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transitions[base..base + self.n_states]
    }

    fn decode(&self, x: &[f64], u: &[f64]) -> (usize, usize) {
        let s = (x[0].round().max(0.0) as usize).min(self.n_states - 1);
        let a = (u[0].round().max(0.0) as usize).min(self.n_actions - 1);
        (s, a)
    }

    /// Inverse-CDF successor selection from a uniform variate in [0, 1).
    fn successor(&self, s: usize, a: usize, r: f64) -> usize {
        let row = self.row(s, a);
        let mut acc = 0.0;
        for (i, p) in row.iter().enumerate() {
            acc += p;
            if r < acc {
                return i;
            }
        }
        self.n_states - 1
    }
}

/// Closed-form transition families. Parameters are interpreted per family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TransitionFamily {
    /// x+ = x + u + w, componentwise.
    Shift,
    /// x+ = a*x + b*u + w with params [a, b]; scalar state/control/noise.
    Linear1d,
    /// p+ = p + tau*v, v+ = v + (tau/m)*u + w with params [m, tau];
    /// noise acts on the velocity.
    DoubleIntegrator,
    /// Finite MDP driven by a uniform variate (the unit noise shifted to
    /// [0, 1)) selecting the successor by inverse CDF.
    Tabular(TabularMdp),
}

impl TransitionFamily {
    pub fn id(&self) -> &'static str {
        match self {
            TransitionFamily::Shift => "shift",
            TransitionFamily::Linear1d => "linear1d",
            TransitionFamily::DoubleIntegrator => "double_integrator",
            TransitionFamily::Tabular(_) => "tabular",
        }
    }

    pub fn apply(&self, params: &[f64], x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
        match self {
            TransitionFamily::Shift => x
                .iter()
                .enumerate()
                .map(|(i, xi)| xi + u.get(i).copied().unwrap_or(0.0) + w.get(i).copied().unwrap_or(0.0))
                .collect(),
            TransitionFamily::Linear1d => {
                let (a, b) = (params[0], params[1]);
                vec![a * x[0] + b * u[0] + w[0]]
            }
            TransitionFamily::DoubleIntegrator => {
                let (mass, tau) = (params[0], params[1]);
                let (p, v) = (x[0], x[1]);
                vec![p + tau * v, v + tau * u[0] / mass + w[0]]
            }
            TransitionFamily::Tabular(mdp) => {
                let (s, a) = mdp.decode(x, u);
                let r = (w[0] + 0.5).clamp(0.0, 1.0 - 1e-15);
                vec![mdp.successor(s, a, r) as f64]
            }
        }
    }

    fn expected_dims(&self) -> Option<(usize, usize, usize)> {
        match self {
            TransitionFamily::Shift => None,
            TransitionFamily::Linear1d => Some((1, 1, 1)),
            TransitionFamily::DoubleIntegrator => Some((2, 1, 1)),
            TransitionFamily::Tabular(_) => Some((1, 1, 1)),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            TransitionFamily::Shift => 0,
            TransitionFamily::Linear1d => 2,
            TransitionFamily::DoubleIntegrator => 2,
            TransitionFamily::Tabular(_) => 0,
        }
    }
}

/// One hypothesis about the dynamics: a transition family with fixed
/// parameters, a noise law, and the admissible state/control boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub params: Vec<f64>,
    pub family: TransitionFamily,
    pub noise: NoiseSpec,
    pub state_box: BoxBounds,
    pub control_box: BoxBounds,
}

/// Slack for snapping states that drifted marginally outside the state box.
pub const BOX_SNAP_TOL: f64 = 1e-9;

impl SystemSpec {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let fail = |reason: String| DynamicsError::BadSystem {
            name: self.name.clone(),
            reason,
        };
        if self.params.len() != self.family.param_count() {
            return Err(fail(format!(
                "family {} expects {} params, got {}",
                self.family.id(),
                self.family.param_count(),
                self.params.len()
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(fail("parameters must be finite".into()));
        }
        if let Some((dx, du, dw)) = self.family.expected_dims() {
            if self.state_box.dim() != dx || self.control_box.dim() != du {
                return Err(fail(format!(
                    "family {} expects d_x={dx}, d_u={du}",
                    self.family.id()
                )));
            }
            if self.noise.dim() != dw {
                return Err(fail(format!(
                    "family {} expects d_w={dw}, noise has {}",
                    self.family.id(),
                    self.noise.dim()
                )));
            }
        } else if self.noise.dim() != self.state_box.dim() {
            return Err(fail("shift family needs noise dimension d_x".into()));
        }
        self.noise.validate().map_err(fail)?;
        Ok(())
    }

    pub fn d_x(&self) -> usize {
        self.state_box.dim()
    }

    pub fn d_u(&self) -> usize {
        self.control_box.dim()
    }

    fn snap_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let (lo, hi) = (self.state_box.lo()[i], self.state_box.hi()[i]);
                if v < lo && v >= lo - BOX_SNAP_TOL {
                    lo
                } else if v > hi && v <= hi + BOX_SNAP_TOL {
                    hi
                } else {
                    v
                }
            })
            .collect()
    }

    /// One transition with the given standardized noise draw.
    pub fn step_with_unit(
        &self,
        x: &[f64],
        u: &[f64],
        unit: &[f64],
        member: usize,
    ) -> Result<StateVec, DynamicsError> {
        let x = self.snap_state(x);
        let u = self.control_box.clamped(u);
        let w = self.noise.materialize(&x, unit);
        let next = StateVec(self.family.apply(&self.params, &x, &u, &w));
        if !next.is_finite() {
            return Err(DynamicsError::NonFiniteTransition { member });
        }
        Ok(next)
    }

    /// One transition with noise freshly drawn from the system's law.
    pub fn step(&self, x: &[f64], u: &[f64], rng: &mut Rng) -> Result<StateVec, DynamicsError> {
        let unit = self.noise.draw_unit(rng);
        self.step_with_unit(x, u, &unit, 0)
    }

    /// Exact finite successor distribution when one exists: tabular families
    /// enumerate their transition row, and deterministic noise collapses any
    /// family to a single successor. Returns None otherwise.
    pub fn exact_successors(
        &self,
        x: &[f64],
        u: &[f64],
    ) -> Result<Option<Vec<(StateVec, f64)>>, DynamicsError> {
        if let TransitionFamily::Tabular(mdp) = &self.family {
            let xs = self.snap_state(x);
            let us = self.control_box.clamped(u);
            let (s, a) = mdp.decode(&xs, &us);
            let list = mdp
                .row(s, a)
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(i, &p)| (StateVec(vec![i as f64]), p))
                .collect();
            return Ok(Some(list));
        }
        if self.noise.is_deterministic() {
            let zeros = vec![0.0; self.noise.dim()];
            let next = self.step_with_unit(x, u, &zeros, 0)?;
            return Ok(Some(vec![(next, 1.0)]));
        }
        Ok(None)
    }
}

/// A common-random-numbers batch: (member index, standardized noise draw)
/// pairs that can be replayed against different candidate controls.
#[derive(Debug, Clone, PartialEq)]
pub struct CrnBatch {
    pub draws: Vec<(usize, Vec<f64>)>,
}

impl CrnBatch {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Finite weighted set of systems standing in for a distribution over
/// dynamics. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEnsemble {
    members: Vec<SystemSpec>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
    pub source_seed: u64,
    pub id: String,
}

impl ModelEnsemble {
    pub fn new(
        members: Vec<SystemSpec>,
        weights: Vec<f64>,
        source_seed: u64,
    ) -> Result<Self, DynamicsError> {
        if members.is_empty() {
            return Err(DynamicsError::EmptyEnsemble);
        }
        if weights.len() != members.len() {
            return Err(DynamicsError::BadWeights(format!(
                "{} weights for {} members",
                weights.len(),
                members.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DynamicsError::BadWeights(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DynamicsError::BadWeights(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        let first = &members[0];
        for m in &members {
            m.validate()?;
            if m.family.id() != first.family.id()
                || m.state_box.dim() != first.state_box.dim()
                || m.control_box.dim() != first.control_box.dim()
            {
                return Err(DynamicsError::MixedMembers);
            }
        }
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cumulative.push(acc);
        }
        let id = format!(
            "{}-n{}-s{}",
            first.family.id(),
            members.len(),
            source_seed
        );
        Ok(Self {
            members,
            weights,
            cumulative,
            source_seed,
            id,
        })
    }

    pub fn uniform(members: Vec<SystemSpec>, source_seed: u64) -> Result<Self, DynamicsError> {
        let n = members.len();
        if n == 0 {
            return Err(DynamicsError::EmptyEnsemble);
        }
        let w = 1.0 / n as f64;
        let mut weights = vec![w; n];
        // Make the weights sum to exactly 1.
        let partial: f64 = weights[..n - 1].iter().sum();
        weights[n - 1] = 1.0 - partial;
        Self::new(members, weights, source_seed)
    }

    pub fn single(member: SystemSpec, source_seed: u64) -> Result<Self, DynamicsError> {
        Self::new(vec![member], vec![1.0], source_seed)
    }

    pub fn members(&self) -> &[SystemSpec] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn template(&self) -> &SystemSpec {
        &self.members[0]
    }

    pub fn sample_member_index(&self, rng: &mut Rng) -> usize {
        let r: f64 = rng.random_range(0.0..1.0);
        self.cumulative
            .iter()
            .position(|&c| r < c)
            .unwrap_or(self.members.len() - 1)
    }

    pub fn sample_member(&self, rng: &mut Rng) -> &SystemSpec {
        &self.members[self.sample_member_index(rng)]
    }

    /// Draws a reusable (member, unit-noise) batch.
    pub fn draw_crn(&self, m: usize, rng: &mut Rng) -> CrnBatch {
        let draws = (0..m)
            .map(|_| {
                let idx = self.sample_member_index(rng);
                let unit = self.members[idx].noise.draw_unit(rng);
                (idx, unit)
            })
            .collect();
        CrnBatch { draws }
    }

    /// Applies a CRN batch at (x, u): a pure function of its arguments.
    pub fn next_states_with(
        &self,
        batch: &CrnBatch,
        x: &[f64],
        u: &[f64],
    ) -> Result<Vec<StateVec>, DynamicsError> {
        batch
            .draws
            .iter()
            .map(|(idx, unit)| self.members[*idx].step_with_unit(x, u, unit, *idx))
            .collect()
    }

    /// `m` independent draws of the one-step successor at (x, u).
    pub fn sample_next_states(
        &self,
        x: &[f64],
        u: &[f64],
        m: usize,
        rng: &mut Rng,
    ) -> Result<Vec<StateVec>, DynamicsError> {
        let batch = self.draw_crn(m, rng);
        self.next_states_with(&batch, x, u)
    }

    /// Exact successor mixture over members, when every member enumerates.
    pub fn exact_mixture_successors(
        &self,
        x: &[f64],
        u: &[f64],
    ) -> Result<Option<Vec<(StateVec, f64)>>, DynamicsError> {
        let mut out = Vec::new();
        for (member, weight) in self.members.iter().zip(&self.weights) {
            match member.exact_successors(x, u)? {
                Some(list) => {
                    for (s, p) in list {
                        out.push((s, p * weight));
                    }
                }
                None => return Ok(None),
            }
        }
        Ok(Some(out))
    }

    pub fn save(&self, path: &Path) -> Result<(), DynamicsError> {
        let template = self.template();
        let file = EnsembleFile {
            version: ENSEMBLE_FILE_VERSION,
            kind: "model_ensemble".into(),
            name: template.name.clone(),
            family: template.family.clone(),
            noise: template.noise.clone(),
            state_box: template.state_box.clone(),
            control_box: template.control_box.clone(),
            params: self.members.iter().map(|m| m.params.clone()).collect(),
            weights: self.weights.clone(),
            source_seed: self.source_seed,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DynamicsError> {
        let file: EnsembleFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.version != ENSEMBLE_FILE_VERSION {
            return Err(DynamicsError::UnsupportedVersion(file.version));
        }
        let members = file
            .params
            .into_iter()
            .map(|params| SystemSpec {
                name: file.name.clone(),
                params,
                family: file.family.clone(),
                noise: file.noise.clone(),
                state_box: file.state_box.clone(),
                control_box: file.control_box.clone(),
            })
            .collect();
        Self::new(members, file.weights, file.source_seed)
    }
}

pub const ENSEMBLE_FILE_VERSION: u32 = 1;

/// On-disk ensemble format: shared family/noise/boxes, per-member parameters.
#[derive(Debug, Serialize, Deserialize)]
struct EnsembleFile {
    version: u32,
    kind: String,
    name: String,
    family: TransitionFamily,
    noise: NoiseSpec,
    state_box: BoxBounds,
    control_box: BoxBounds,
    params: Vec<Vec<f64>>,
    weights: Vec<f64>,
    source_seed: u64,
}

/// Closed-loop trace of one rollout on one sampled ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutRecord {
    pub states: Vec<StateVec>,
    pub controls: Vec<ControlVec>,
    pub costs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Indices k (into `states`) with the safety test failing at x_k.
    pub violation_steps: Vec<usize>,
    pub member_index: usize,
    pub seed: u64,
    pub truncated: bool,
}

impl RolloutRecord {
    /// Violations excluding the caller-chosen initial state.
    pub fn violation_count(&self) -> usize {
        self.violation_steps.iter().filter(|&&k| k > 0).count()
    }
}

/// Rolls out a controller for `horizon` steps on one member sampled from the
/// ensemble. On a non-finite transition the record is truncated and flagged
/// rather than discarded.
pub fn rollout(
    ens: &ModelEnsemble,
    mut controller: impl FnMut(&StateVec) -> ControlVec,
    x0: &StateVec,
    horizon: usize,
    safety: &SafetySpec,
    reward: Option<&dyn Fn(&[f64], &[f64]) -> f64>,
    seed: u64,
    rng: &mut Rng,
) -> RolloutRecord {
    assert!(horizon >= 1, "rollout horizon must be at least 1");
    let member_index = ens.sample_member_index(rng);
    let member = &ens.members[member_index];

    let mut record = RolloutRecord {
        states: vec![x0.clone()],
        controls: Vec::with_capacity(horizon),
        costs: vec![safety.cost(x0)],
        rewards: Vec::with_capacity(horizon),
        violation_steps: Vec::new(),
        member_index,
        seed,
        truncated: false,
    };
    if !safety.is_safe(x0) {
        record.violation_steps.push(0);
    }

    for k in 0..horizon {
        let x = record.states[k].clone();
        let u = controller(&x);
        let next = match member.step(&x, &u, rng) {
            Ok(next) => next,
            Err(_) => {
                record.truncated = true;
                break;
            }
        };
        if let Some(r) = reward {
            record.rewards.push(r(&x, &u));
        }
        record.controls.push(u);
        record.costs.push(safety.cost(&next));
        if !safety.is_safe(&next) {
            record.violation_steps.push(k + 1);
        }
        record.states.push(next);
    }
    record
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use crate::safety::{CostForm, SafeSetForm};

    fn shift_system(noise: NoiseSpec) -> SystemSpec {
        SystemSpec {
            name: "shift".into(),
            params: vec![],
            family: TransitionFamily::Shift,
            noise,
            state_box: BoxBounds::scalar(-10.0, 10.0),
            control_box: BoxBounds::scalar(-1.0, 1.0),
        }
    }

    fn linear_system(a: f64, b: f64, sigma: f64) -> SystemSpec {
        SystemSpec {
            name: "lin".into(),
            params: vec![a, b],
            family: TransitionFamily::Linear1d,
            noise: NoiseSpec::gaussian(vec![sigma]),
            state_box: BoxBounds::scalar(-5.0, 5.0),
            control_box: BoxBounds::scalar(-2.0, 2.0),
        }
    }

    fn trivial_safety() -> SafetySpec {
        SafetySpec::new(
            SafeSetForm::AbsBound { index: 0, bound: 1.0 },
            CostForm::AbsHinge {
                index: 0,
                threshold: 0.5,
            },
            0.5,
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn noiseless_shift_step() {
        let sys = shift_system(NoiseSpec::degenerate(1));
        let mut rng = substream(0, Stream::Rollout, 0);
        let next = sys.step(&[0.5], &[0.2], &mut rng).unwrap();
        assert_eq!(next.0, vec![0.7]);
    }

    #[test]
    fn zero_sigma_gaussian_equals_degenerate() {
        let gauss = shift_system(NoiseSpec::gaussian(vec![0.0]));
        let degen = shift_system(NoiseSpec::degenerate(1));
        let mut r1 = substream(3, Stream::Rollout, 1);
        let mut r2 = substream(3, Stream::Rollout, 1);
        for x in [-0.4, 0.0, 0.9] {
            let a = gauss.step(&[x], &[0.25], &mut r1).unwrap();
            let b = degen.step(&[x], &[0.25], &mut r2).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn linear_gaussian_step_mean_matches_analytic() {
        let sys = linear_system(1.0, 0.5, 0.05);
        let mut rng = substream(11, Stream::Rollout, 0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += sys.step(&[0.0], &[1.0], &mut rng).unwrap()[0];
        }
        let mean = sum / n as f64;
        let tol = 3.0 * 0.05 / (n as f64).sqrt();
        assert!(
            (mean - 0.5).abs() <= tol,
            "mean {mean} outside 0.5 +- {tol}"
        );
    }

    #[test]
    fn noise_is_zero_mean_per_coordinate() {
        let specs = [
            NoiseSpec::gaussian(vec![0.3, 0.05]),
            NoiseSpec::uniform(vec![0.2, 0.6]),
            NoiseSpec {
                kind: NoiseKind::GaussianDiagonal {
                    sigmas: vec![0.1, 0.1],
                },
                state_scale: Some(StateScale {
                    weights: vec![0.5, 0.0],
                    bias: 1.0,
                }),
            },
        ];
        let x = [2.0, -1.0];
        let n = 1_000_000usize;
        for (i, spec) in specs.iter().enumerate() {
            let mut rng = substream(5, Stream::Rollout, i as u64);
            let mut sums = vec![0.0; spec.dim()];
            for _ in 0..n {
                for (s, w) in sums.iter_mut().zip(spec.sample(&x, &mut rng)) {
                    *s += w;
                }
            }
            let mult = spec
                .state_scale
                .as_ref()
                .map(|s| s.multiplier(&x))
                .unwrap_or(1.0);
            for (coord, sum) in sums.iter().enumerate() {
                let scale = spec.scales()[coord] * mult;
                let bound = 4.0 * scale / (n as f64).sqrt();
                assert!(
                    (sum / n as f64).abs() <= bound,
                    "noise {i} coord {coord}: mean {} exceeds {bound}",
                    sum / n as f64
                );
            }
        }
    }

    #[test]
    fn single_member_and_degenerate_weights() {
        let sys = linear_system(1.0, 0.5, 0.05);
        let single = ModelEnsemble::single(sys.clone(), 0).unwrap();
        let mut rng = substream(0, Stream::EnsembleGen, 0);
        for _ in 0..20 {
            assert_eq!(single.sample_member_index(&mut rng), 0);
        }
        let two = ModelEnsemble::new(vec![sys.clone(), sys], vec![1.0, 0.0], 0).unwrap();
        for _ in 0..20 {
            assert_eq!(two.sample_member_index(&mut rng), 0);
        }
    }

    #[test]
    fn member_sampling_frequencies_are_uniform() {
        let members: Vec<SystemSpec> = (0..10)
            .map(|i| linear_system(1.0 + 0.01 * i as f64, 0.5, 0.05))
            .collect();
        let ens = ModelEnsemble::uniform(members, 0).unwrap();
        let mut rng = substream(9, Stream::EnsembleGen, 0);
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[ens.sample_member_index(&mut rng)] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let freq = *c as f64 / n as f64;
            assert!(
                (freq - 0.1).abs() <= 0.01,
                "member {i} frequency {freq} outside 0.1 +- 0.01"
            );
        }
    }

    #[test]
    fn bad_weights_rejected() {
        let sys = linear_system(1.0, 0.5, 0.05);
        assert!(matches!(
            ModelEnsemble::new(vec![sys.clone()], vec![0.9], 0),
            Err(DynamicsError::BadWeights(_))
        ));
        assert!(matches!(
            ModelEnsemble::new(vec![sys], vec![-1.0, 2.0], 0),
            Err(DynamicsError::BadWeights(_))
        ));
    }

    #[test]
    fn single_degenerate_draw_is_the_noiseless_step() {
        let sys = shift_system(NoiseSpec::degenerate(1));
        let ens = ModelEnsemble::single(sys, 0).unwrap();
        let mut rng = substream(1, Stream::Rollout, 0);
        let next = ens.sample_next_states(&[0.25], &[0.5], 1, &mut rng).unwrap();
        assert_eq!(next, vec![StateVec(vec![0.75])]);
    }

    #[test]
    fn crn_batch_is_pure_in_the_control() {
        let members: Vec<SystemSpec> = (0..4)
            .map(|i| linear_system(0.9 + 0.05 * i as f64, 0.5, 0.1))
            .collect();
        let ens = ModelEnsemble::uniform(members, 0).unwrap();
        let mut rng = substream(2, Stream::Rollout, 0);
        let batch = ens.draw_crn(32, &mut rng);
        let a = ens.next_states_with(&batch, &[0.3], &[0.7]).unwrap();
        let b = ens.next_states_with(&batch, &[0.3], &[0.7]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_variance_matches_noise_variance() {
        let sigma = 0.2;
        let ens = ModelEnsemble::single(linear_system(1.0, 0.5, sigma), 0).unwrap();
        let mut rng = substream(4, Stream::Rollout, 0);
        let n = 100_000;
        let samples = ens.sample_next_states(&[0.0], &[1.0], n, &mut rng).unwrap();
        let mean: f64 = samples.iter().map(|s| s[0]).sum::<f64>() / n as f64;
        let var: f64 =
            samples.iter().map(|s| (s[0] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(
            (var - sigma * sigma).abs() <= 0.05 * sigma * sigma,
            "variance {var} outside {} +- 5%",
            sigma * sigma
        );
    }

    #[test]
    fn rollout_shapes_and_no_violations() {
        let sys = shift_system(NoiseSpec::degenerate(1));
        let ens = ModelEnsemble::single(sys, 0).unwrap();
        let safety = trivial_safety();
        let mut rng = substream(6, Stream::Rollout, 0);
        let record = rollout(
            &ens,
            |_| ControlVec(vec![0.0]),
            &StateVec(vec![0.2]),
            1,
            &safety,
            None,
            0,
            &mut rng,
        );
        assert_eq!(record.states.len(), 2);
        assert_eq!(record.controls.len(), 1);
        assert_eq!(record.costs.len(), 2);

        let mut rng = substream(6, Stream::Rollout, 1);
        let record = rollout(
            &ens,
            |_| ControlVec(vec![0.0]),
            &StateVec(vec![0.2]),
            50,
            &safety,
            None,
            1,
            &mut rng,
        );
        assert!(record.violation_steps.is_empty());
        assert!(!record.truncated);
    }

    #[test]
    fn full_throttle_first_violation_matches_scalar_oracle() {
        let sys = SystemSpec {
            name: "di".into(),
            params: vec![1.0, 0.1],
            family: TransitionFamily::DoubleIntegrator,
            noise: NoiseSpec::degenerate(1),
            state_box: BoxBounds::new(vec![-100.0, -12.0], vec![100.0, 12.0]).unwrap(),
            control_box: BoxBounds::scalar(-2.0, 2.0),
        };
        let safety = SafetySpec::new(
            SafeSetForm::UpperBound { index: 1, bound: 2.0 },
            CostForm::Hinge {
                weights: vec![0.0, 1.0],
                offset: 10.0,
            },
            12.0,
            0.95,
        )
        .unwrap();
        let ens = ModelEnsemble::single(sys, 0).unwrap();
        let mut rng = substream(8, Stream::Rollout, 0);
        let record = rollout(
            &ens,
            |_| ControlVec(vec![2.0]),
            &StateVec(vec![0.0, 0.0]),
            100,
            &safety,
            None,
            0,
            &mut rng,
        );

        // Independent scalar integration: v_k = k * tau * u / m.
        let mut v = 0.0;
        let mut expected_first = None;
        for k in 1..=100 {
            v += 0.1 * 2.0 / 1.0;
            if v > 2.0 {
                expected_first = Some(k);
                break;
            }
        }
        assert_eq!(record.violation_steps.first().copied(), expected_first);
    }

    #[test]
    fn rollouts_are_bitwise_deterministic() {
        let members: Vec<SystemSpec> = (0..5)
            .map(|i| linear_system(0.95 + 0.02 * i as f64, 0.5, 0.05))
            .collect();
        let ens = ModelEnsemble::uniform(members, 0).unwrap();
        let safety = trivial_safety();
        let run = || {
            let mut rng = substream(12, Stream::Rollout, 3);
            rollout(
                &ens,
                |x| ControlVec(vec![-0.5 * x[0]]),
                &StateVec(vec![0.8]),
                40,
                &safety,
                Some(&|x: &[f64], _u: &[f64]| x[0].max(0.0)),
                3,
                &mut rng,
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ensemble_file_round_trip() {
        let members: Vec<SystemSpec> = (0..3)
            .map(|i| linear_system(1.0 + 0.1 * i as f64, 0.5, 0.05))
            .collect();
        let ens = ModelEnsemble::uniform(members, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens.json");
        ens.save(&path).unwrap();
        let loaded = ModelEnsemble::load(&path).unwrap();
        assert_eq!(ens, loaded);
    }

    #[test]
    fn tabular_row_sums_validated() {
        let bad = TabularMdp::new(2, 1, vec![0.5, 0.4, 0.0, 1.0]);
        assert!(matches!(
            bad,
            Err(DynamicsError::BadTransitionRow { state: 0, .. })
        ));
    }

    #[test]
    fn tabular_steps_follow_the_tensor() {
        let mdp = TabularMdp::new(2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let sys = SystemSpec {
            name: "mdp".into(),
            params: vec![],
            family: TransitionFamily::Tabular(mdp),
            noise: NoiseSpec::uniform(vec![0.5]),
            state_box: BoxBounds::scalar(0.0, 1.0),
            control_box: BoxBounds::scalar(0.0, 0.0),
        };
        let mut rng = substream(0, Stream::Rollout, 9);
        // Deterministic tensor: 0 -> 1 -> 0 regardless of the noise draw.
        let next = sys.step(&[0.0], &[0.0], &mut rng).unwrap();
        assert_eq!(next.0, vec![1.0]);
        let next = sys.step(&[1.0], &[0.0], &mut rng).unwrap();
        assert_eq!(next.0, vec![0.0]);
    }
}
