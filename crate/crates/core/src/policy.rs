//! Policy representations and fitted value-iteration training.
//!
//! Training discretizes the control box, freezes one successor sample set
//! per (node, candidate control), and runs Jacobi Q-sweeps to the empirical
//! fixed point. Candidates are ordered by magnitude then lexicographically,
//! so argmax/argmin ties resolve to the smallest control.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlVec, DynamicsError, ModelEnsemble, StateVec};
use crate::grid::{BoxBounds, Grid, GridError};
use crate::rng::Rng;
use crate::safety::SafetySpec;
use crate::value::{
    evaluate_policy, McConfig, OutOfBox, ValueError, ValueFunction, ValueMeta,
};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("reward must be nonnegative, got {0}")]
    NegativeReward(f64),
    #[error("reward table has wrong size: {got}, expected {expected}")]
    BadRewardTable { got: usize, expected: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error("unsupported file version {0}")]
    UnsupportedVersion(u32),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Control law representations. Output is always clamped into the control box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Per-node controls, multilinearly interpolated between nodes.
    GridTable {
        grid: Grid,
        /// Row-major node-major: controls[node * d_u + j].
        controls: Vec<f64>,
        control_box: BoxBounds,
    },
    /// u = -K x for a d_u x d_x gain matrix (row-major).
    LinearGain {
        gain: Vec<f64>,
        d_x: usize,
        control_box: BoxBounds,
    },
    Constant {
        control: Vec<f64>,
        control_box: BoxBounds,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub id: String,
    pub kind: PolicyKind,
}

impl Policy {
    pub fn constant(id: &str, control: Vec<f64>, control_box: BoxBounds) -> Self {
        Self {
            id: id.into(),
            kind: PolicyKind::Constant {
                control,
                control_box,
            },
        }
    }

    pub fn linear_gain(id: &str, gain: Vec<f64>, d_x: usize, control_box: BoxBounds) -> Self {
        Self {
            id: id.into(),
            kind: PolicyKind::LinearGain {
                gain,
                d_x,
                control_box,
            },
        }
    }

    pub fn control_box(&self) -> &BoxBounds {
        match &self.kind {
            PolicyKind::GridTable { control_box, .. } => control_box,
            PolicyKind::LinearGain { control_box, .. } => control_box,
            PolicyKind::Constant { control_box, .. } => control_box,
        }
    }

    pub fn act(&self, x: &[f64]) -> ControlVec {
        let mut u = match &self.kind {
            PolicyKind::GridTable {
                grid,
                controls,
                control_box,
            } => {
                let d_u = control_box.dim();
                let clamped = grid.bounds().clamped(x);
                let mut stencil = Vec::with_capacity(1 << grid.dim());
                grid.stencil(&clamped, &mut stencil).expect("dims checked");
                let mut u = vec![0.0; d_u];
                for &(node, w) in &stencil {
                    for (j, uj) in u.iter_mut().enumerate() {
                        *uj += w * controls[node * d_u + j];
                    }
                }
                u
            }
            PolicyKind::LinearGain { gain, d_x, .. } => {
                let d_u = gain.len() / d_x;
                (0..d_u)
                    .map(|i| -(0..*d_x).map(|j| gain[i * d_x + j] * x[j]).sum::<f64>())
                    .collect()
            }
            PolicyKind::Constant { control, .. } => control.clone(),
        };
        self.control_box().clamp(&mut u);
        ControlVec(u)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let file = PolicyFile {
            version: POLICY_FILE_VERSION,
            kind: "policy".into(),
            policy: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let file: PolicyFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.version != POLICY_FILE_VERSION {
            return Err(PolicyError::UnsupportedVersion(file.version));
        }
        Ok(file.policy)
    }
}

pub const POLICY_FILE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct PolicyFile {
    version: u32,
    kind: String,
    policy: Policy,
}

/// Closed-form nonnegative reward families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardForm {
    Zero,
    Constant { value: f64 },
    /// max(0, w·x + offset - effort * |u|^2)
    StateDrive {
        weights: Vec<f64>,
        offset: f64,
        effort_weight: f64,
    },
    /// Per (state, action) values for integer-coded MDPs.
    Table { n_actions: usize, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub form: RewardForm,
    pub gamma: f64,
}

impl RewardSpec {
    pub fn new(form: RewardForm, gamma: f64) -> Result<Self, PolicyError> {
        match &form {
            RewardForm::Constant { value } if *value < 0.0 => {
                return Err(PolicyError::NegativeReward(*value));
            }
            RewardForm::Table { values, .. } => {
                if let Some(v) = values.iter().find(|v| **v < 0.0) {
                    return Err(PolicyError::NegativeReward(*v));
                }
            }
            _ => {}
        }
        Ok(Self { form, gamma })
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        match &self.form {
            RewardForm::Zero => 0.0,
            RewardForm::Constant { value } => *value,
            RewardForm::StateDrive {
                weights,
                offset,
                effort_weight,
            } => {
                let drive: f64 = weights.iter().zip(x).map(|(w, xi)| w * xi).sum();
                let effort: f64 = u.iter().map(|ui| ui * ui).sum();
                (drive + offset - effort_weight * effort).max(0.0)
            }
            RewardForm::Table { n_actions, values } => {
                let s = (x[0].round().max(0.0) as usize)
                    .min(values.len() / n_actions.max(&1usize) - 1);
                let a = (u[0].round().max(0.0) as usize).min(n_actions - 1);
                values[s * n_actions + a]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Evenly spaced candidate controls per control axis.
    pub control_points: usize,
    pub mc: McConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            control_points: 21,
            mc: McConfig::default(),
        }
    }
}

/// Candidate controls over the box, ordered by norm then lexicographically
/// so tie-breaking picks the smallest-magnitude control.
pub fn control_candidates(control_box: &BoxBounds, points_per_axis: usize) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = (0..control_box.dim())
        .map(|a| {
            let (lo, hi) = (control_box.lo()[a], control_box.hi()[a]);
            let n = points_per_axis.max(1);
            if n == 1 || lo == hi {
                vec![0.5 * (lo + hi)]
            } else {
                (0..n)
                    .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                    .collect()
            }
        })
        .collect();
    let mut candidates = vec![Vec::new()];
    for axis in &axes {
        let mut next = Vec::with_capacity(candidates.len() * axis.len());
        for c in &candidates {
            for &v in axis {
                let mut c = c.clone();
                c.push(v);
                next.push(c);
            }
        }
        candidates = next;
    }
    candidates.sort_by(|a, b| {
        let na: f64 = a.iter().map(|v| v * v).sum();
        let nb: f64 = b.iter().map(|v| v * v).sum();
        na.partial_cmp(&nb)
            .unwrap()
            .then_with(|| a.partial_cmp(b).unwrap())
    });
    candidates
}

pub struct TrainResult {
    pub policy: Policy,
    pub value: ValueFunction,
    pub converged: bool,
    pub sweeps: usize,
}

enum Objective<'a> {
    MaximizeReward(&'a RewardSpec),
    MinimizeCost(&'a SafetySpec),
}

fn fitted_control_iteration(
    ens: &ModelEnsemble,
    grid: &Grid,
    objective: &Objective<'_>,
    policy_id: &str,
    tc: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainResult, PolicyError> {
    let control_box = ens.template().control_box.clone();
    let candidates = control_candidates(&control_box, tc.control_points);
    let nodes = grid.node_count();
    let n_cand = candidates.len();
    let gamma = match objective {
        Objective::MaximizeReward(r) => r.gamma,
        Objective::MinimizeCost(s) => s.gamma,
    };

    // Frozen successor stencils per (node, candidate), compressed rows.
    let mut idx: Vec<u32> = Vec::new();
    let mut w: Vec<f64> = Vec::new();
    let mut row_ptr: Vec<usize> = Vec::with_capacity(nodes * n_cand + 1);
    row_ptr.push(0);
    let mut immediate = vec![0.0; nodes * n_cand];
    let mut stencil = Vec::with_capacity(1 << grid.dim());
    for node in 0..nodes {
        let x = grid.node_state(node);
        for (c, u) in candidates.iter().enumerate() {
            immediate[node * n_cand + c] = match objective {
                Objective::MaximizeReward(r) => r.eval(&x, u),
                Objective::MinimizeCost(s) => s.cost(&x),
            };
            for (member_idx, (member, weight)) in
                ens.members().iter().zip(ens.weights()).enumerate()
            {
                if *weight == 0.0 {
                    continue;
                }
                if let Some(list) = member.exact_successors(&x, u)? {
                    for (succ, p) in list {
                        let clamped = grid.bounds().clamped(&succ);
                        grid.stencil(&clamped, &mut stencil)?;
                        for &(i, sw) in &stencil {
                            idx.push(i as u32);
                            w.push(weight * p * sw);
                        }
                    }
                } else {
                    let draws = train_unit_draws(member, &tc.mc, rng);
                    let per = weight / draws.len() as f64;
                    for unit in &draws {
                        let succ = member.step_with_unit(&x, u, unit, member_idx)?;
                        let clamped = grid.bounds().clamped(&succ);
                        grid.stencil(&clamped, &mut stencil)?;
                        for &(i, sw) in &stencil {
                            idx.push(i as u32);
                            w.push(per * sw);
                        }
                    }
                }
            }
            row_ptr.push(idx.len());
        }
    }

    let maximize = matches!(objective, Objective::MaximizeReward(_));
    let mut table = vec![0.0; nodes];
    let mut next = vec![0.0; nodes];
    let mut best_cand = vec![0usize; nodes];
    let mut sweeps = 0;
    let mut converged = false;
    let mut residual = f64::INFINITY;
    while sweeps < tc.mc.max_sweeps {
        sweeps += 1;
        residual = 0.0;
        for node in 0..nodes {
            let mut best = f64::NAN;
            let mut best_c = 0usize;
            for c in 0..n_cand {
                let row = node * n_cand + c;
                let (a, b) = (row_ptr[row], row_ptr[row + 1]);
                let cont: f64 = idx[a..b]
                    .iter()
                    .zip(&w[a..b])
                    .map(|(&i, &wi)| wi * table[i as usize])
                    .sum();
                let q = immediate[row] + gamma * cont;
                let better = if best.is_nan() {
                    true
                } else if maximize {
                    q > best
                } else {
                    q < best
                };
                if better {
                    best = q;
                    best_c = c;
                }
            }
            residual = residual.max((best - table[node]).abs());
            next[node] = best;
            best_cand[node] = best_c;
        }
        std::mem::swap(&mut table, &mut next);
        if residual <= tc.mc.tol {
            converged = true;
            break;
        }
    }

    let d_u = control_box.dim();
    let mut controls = vec![0.0; nodes * d_u];
    for node in 0..nodes {
        controls[node * d_u..(node + 1) * d_u].copy_from_slice(&candidates[best_cand[node]]);
    }
    let policy = Policy {
        id: policy_id.to_string(),
        kind: PolicyKind::GridTable {
            grid: grid.clone(),
            controls,
            control_box,
        },
    };
    let value = ValueFunction::new(
        grid.clone(),
        table,
        OutOfBox::Clamp,
        ValueMeta {
            policy_id: policy_id.to_string(),
            gamma,
            ensemble_id: ens.id.clone(),
            converged,
            sweeps,
            residual,
        },
    );
    Ok(TrainResult {
        policy,
        value,
        converged,
        sweeps,
    })
}

fn train_unit_draws(
    member: &crate::dynamics::SystemSpec,
    mc: &McConfig,
    rng: &mut Rng,
) -> Vec<Vec<f64>> {
    use crate::dynamics::NoiseKind;
    use crate::math::inverse_normal_cdf;
    use crate::value::NoiseRule;
    let l = mc.noise_samples.max(1);
    if matches!(mc.rule, NoiseRule::Stratified) && member.noise.dim() == 1 {
        let quantile = |p: f64| match &member.noise.kind {
            NoiseKind::GaussianDiagonal { .. } => inverse_normal_cdf(p),
            NoiseKind::UniformBox { .. } => 2.0 * p - 1.0,
            NoiseKind::Degenerate { .. } => 0.0,
        };
        (0..l)
            .map(|i| vec![quantile((i as f64 + 0.5) / l as f64)])
            .collect()
    } else {
        (0..l).map(|_| member.noise.draw_unit(rng)).collect()
    }
}

/// Learns the reward-maximizing policy by fitted value iteration over the
/// ensemble. Ties resolve to the smallest-magnitude control.
pub fn train_nominal(
    ens: &ModelEnsemble,
    reward: &RewardSpec,
    grid: &Grid,
    tc: &TrainConfig,
    policy_id: &str,
    rng: &mut Rng,
) -> Result<TrainResult, PolicyError> {
    fitted_control_iteration(
        ens,
        grid,
        &Objective::MaximizeReward(reward),
        policy_id,
        tc,
        rng,
    )
}

/// Learns the cost-minimizing backup policy, then re-evaluates it with the
/// policy-evaluation machinery so the returned value function is the fixed
/// point of the greedy policy itself.
pub fn train_safe(
    ens: &ModelEnsemble,
    spec: &SafetySpec,
    grid: &Grid,
    tc: &TrainConfig,
    policy_id: &str,
    rng: &mut Rng,
) -> Result<TrainResult, PolicyError> {
    let trained = fitted_control_iteration(
        ens,
        grid,
        &Objective::MinimizeCost(spec),
        policy_id,
        tc,
        rng,
    )?;
    let policy = trained.policy;
    let value = evaluate_policy(
        ens,
        |x| policy.act(x),
        policy_id,
        spec,
        grid,
        &tc.mc,
        rng,
    )?;
    Ok(TrainResult {
        policy,
        value,
        converged: trained.converged,
        sweeps: trained.sweeps,
    })
}

/// Mean cumulative reward of a policy over `n` rollouts from uniformly
/// sampled initial states; discounted by the reward's gamma when requested.
#[allow(clippy::too_many_arguments)]
pub fn expected_reward(
    ens: &ModelEnsemble,
    policy: &Policy,
    reward: &RewardSpec,
    x0_box: &BoxBounds,
    horizon: usize,
    n: usize,
    discounted: bool,
    rng: &mut Rng,
) -> Result<f64, PolicyError> {
    assert!(n >= 1);
    let mut total = 0.0;
    for _ in 0..n {
        let x0 = StateVec(x0_box.sample_uniform(rng));
        let mut x = x0;
        let member = ens.sample_member(rng);
        let mut discount = 1.0;
        for _ in 0..horizon {
            let u = policy.act(&x);
            total += discount * reward.eval(&x, &u);
            if discounted {
                discount *= reward.gamma;
            }
            x = member.step(&x, &u, rng)?;
        }
    }
    Ok(total / n as f64)
}
