//! Grid-interpolated safety value functions and fitted policy evaluation.
//!
//! Policy evaluation freezes one set of successor samples per grid node and
//! iterates the resulting empirical Bellman operator to its fixed point
//! (Jacobi sweeps), so results are deterministic and converge geometrically.
//! Members with enumerable successor distributions (tabular transitions,
//! deterministic noise) contribute exact expectations instead of samples.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlVec, DynamicsError, ModelEnsemble};
use crate::grid::{Grid, GridError};
use crate::math::inverse_normal_cdf;
use crate::rng::Rng;
use crate::safety::SafetySpec;

#[derive(Debug, Error)]
pub enum ValueError {
    #[error("state {0:?} outside the value domain")]
    OutOfDomain(Vec<f64>),
    #[error("no unsafe states found inside the value domain")]
    NoUnsafeStates,
    #[error("minimum value over unsafe samples is {min}, cannot form a positive level")]
    NonPositiveLevel { min: f64 },
    #[error("no grid node has value <= {threshold}")]
    EmptySublevelSet { threshold: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("unsupported file version {0}")]
    UnsupportedVersion(u32),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfBox {
    Clamp,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueMeta {
    pub policy_id: String,
    pub gamma: f64,
    pub ensemble_id: String,
    pub converged: bool,
    pub sweeps: usize,
    /// Sup-norm change of the final sweep.
    pub residual: f64,
}

/// How per-member noise expectations are approximated during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRule {
    /// Midpoint-quantile draws: deterministic, low-variance, exact in the
    /// sample-count limit. Falls back to Monte Carlo above one noise axis.
    Stratified,
    /// Independent draws from the evaluation RNG stream.
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    /// Noise samples per ensemble member (ignored for enumerable members).
    pub noise_samples: usize,
    pub rule: NoiseRule,
    /// Sup-norm stopping tolerance for fitted sweeps.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            noise_samples: 32,
            rule: NoiseRule::Stratified,
            tol: 1e-6,
            max_sweeps: 10_000,
        }
    }
}

/// Multilinearly interpolated value table over a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    grid: Grid,
    table: Vec<f64>,
    pub out_of_box: OutOfBox,
    pub meta: ValueMeta,
}

impl ValueFunction {
    pub fn new(
        grid: Grid,
        table: Vec<f64>,
        out_of_box: OutOfBox,
        meta: ValueMeta,
    ) -> Self {
        assert_eq!(grid.node_count(), table.len(), "table size mismatch");
        Self {
            grid,
            table,
            out_of_box,
            meta,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn node_value(&self, flat: usize) -> f64 {
        self.table[flat]
    }

    pub fn min_value(&self) -> f64 {
        self.table.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.table.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64, ValueError> {
        if !self.grid.bounds().contains(x, 1e-9) {
            match self.out_of_box {
                OutOfBox::Error => return Err(ValueError::OutOfDomain(x.to_vec())),
                OutOfBox::Clamp => {}
            }
        }
        let mut buf = Vec::with_capacity(1 << self.grid.dim());
        Ok(self.evaluate_clamped(x, &mut buf))
    }

    /// Hot-path evaluation: clamps into the box and reuses a stencil buffer.
    pub fn evaluate_clamped(&self, x: &[f64], buf: &mut Vec<(usize, f64)>) -> f64 {
        let clamped = self.grid.bounds().clamped(x);
        self.grid
            .stencil(&clamped, buf)
            .expect("dimension checked by caller");
        buf.iter().map(|&(i, w)| w * self.table[i]).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), ValueError> {
        let file = ValueFile {
            version: VALUE_FILE_VERSION,
            kind: "value_function".into(),
            value: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ValueError> {
        let file: ValueFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.version != VALUE_FILE_VERSION {
            return Err(ValueError::UnsupportedVersion(file.version));
        }
        Ok(file.value)
    }
}

pub const VALUE_FILE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ValueFile {
    version: u32,
    kind: String,
    value: ValueFunction,
}

/// Grid nodes with value at or below a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SublevelSet {
    pub threshold: f64,
    pub nodes: Vec<usize>,
}

pub fn sublevel_members(v: &ValueFunction, threshold: f64) -> Result<SublevelSet, ValueError> {
    let nodes: Vec<usize> = v
        .table
        .iter()
        .enumerate()
        .filter(|(_, val)| **val <= threshold)
        .map(|(i, _)| i)
        .collect();
    if nodes.is_empty() {
        return Err(ValueError::EmptySublevelSet { threshold });
    }
    Ok(SublevelSet { threshold, nodes })
}

/// Frozen weighted-successor table in compressed sparse rows: each node's
/// row maps onto interpolation stencil entries of its successors.
struct SuccessorRows {
    idx: Vec<u32>,
    w: Vec<f64>,
    row_ptr: Vec<usize>,
}

impl SuccessorRows {
    fn apply(&self, node: usize, table: &[f64]) -> f64 {
        let (a, b) = (self.row_ptr[node], self.row_ptr[node + 1]);
        self.idx[a..b]
            .iter()
            .zip(&self.w[a..b])
            .map(|(&i, &w)| w * table[i as usize])
            .sum()
    }
}

/// Standardized draws used for one member's noise expectation.
fn unit_draws(
    member: &crate::dynamics::SystemSpec,
    mc: &McConfig,
    rng: &mut Rng,
) -> Vec<Vec<f64>> {
    use crate::dynamics::NoiseKind;
    let l = mc.noise_samples.max(1);
    let stratified_ok = matches!(mc.rule, NoiseRule::Stratified) && member.noise.dim() == 1;
    if stratified_ok {
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

fn build_successor_rows(
    ens: &ModelEnsemble,
    mut policy: impl FnMut(&[f64]) -> ControlVec,
    grid: &Grid,
    mc: &McConfig,
    rng: &mut Rng,
) -> Result<SuccessorRows, ValueError> {
    let nodes = grid.node_count();
    let mut rows = SuccessorRows {
        idx: Vec::new(),
        w: Vec::new(),
        row_ptr: Vec::with_capacity(nodes + 1),
    };
    rows.row_ptr.push(0);
    let mut stencil = Vec::with_capacity(1 << grid.dim());
    for node in 0..nodes {
        let x = grid.node_state(node);
        let u = policy(&x);
        for (member_idx, (member, weight)) in
            ens.members().iter().zip(ens.weights()).enumerate()
        {
            if *weight == 0.0 {
                continue;
            }
            if let Some(list) = member.exact_successors(&x, &u)? {
                for (succ, p) in list {
                    let clamped = grid.bounds().clamped(&succ);
                    grid.stencil(&clamped, &mut stencil)?;
                    for &(i, sw) in &stencil {
                        rows.idx.push(i as u32);
                        rows.w.push(weight * p * sw);
                    }
                }
            } else {
                let draws = unit_draws(member, mc, rng);
                let per = weight / draws.len() as f64;
                for unit in &draws {
                    let succ = member.step_with_unit(&x, &u, unit, member_idx)?;
                    let clamped = grid.bounds().clamped(&succ);
                    grid.stencil(&clamped, &mut stencil)?;
                    for &(i, sw) in &stencil {
                        rows.idx.push(i as u32);
                        rows.w.push(per * sw);
                    }
                }
            }
        }
        rows.row_ptr.push(rows.idx.len());
    }
    Ok(rows)
}

/// Fitted policy evaluation of the discounted safety cost over the ensemble:
/// iterates `V <- c + gamma * E[V(x+)]` on grid nodes until the sup-norm
/// change drops below `mc.tol` (the `converged` flag records failure).
pub fn evaluate_policy(
    ens: &ModelEnsemble,
    policy: impl FnMut(&[f64]) -> ControlVec,
    policy_id: &str,
    spec: &SafetySpec,
    grid: &Grid,
    mc: &McConfig,
    rng: &mut Rng,
) -> Result<ValueFunction, ValueError> {
    let nodes = grid.node_count();
    let rows = build_successor_rows(ens, policy, grid, mc, rng)?;
    let immediate: Vec<f64> = (0..nodes).map(|n| spec.cost(&grid.node_state(n))).collect();

    let mut table = vec![0.0; nodes];
    let mut next = vec![0.0; nodes];
    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    while sweeps < mc.max_sweeps {
        sweeps += 1;
        residual = 0.0;
        for node in 0..nodes {
            let v = immediate[node] + spec.gamma * rows.apply(node, &table);
            residual = residual.max((v - table[node]).abs());
            next[node] = v;
        }
        std::mem::swap(&mut table, &mut next);
        if residual <= mc.tol {
            converged = true;
            break;
        }
    }

    Ok(ValueFunction::new(
        grid.clone(),
        table,
        OutOfBox::Clamp,
        ValueMeta {
            policy_id: policy_id.to_string(),
            gamma: spec.gamma,
            ensemble_id: ens.id.clone(),
            converged,
            sweeps,
            residual,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualReport {
    pub max_abs: f64,
    pub mean_abs: f64,
    pub states: usize,
}

/// One-step Bellman residual `V(x) - c(x) - gamma*E[V(x+)]` over a state
/// sample, with the expectation taken exactly where members enumerate and by
/// fresh sampling otherwise.
pub fn bellman_residual(
    v: &ValueFunction,
    ens: &ModelEnsemble,
    mut policy: impl FnMut(&[f64]) -> ControlVec,
    spec: &SafetySpec,
    states: &[Vec<f64>],
    mc: &McConfig,
    rng: &mut Rng,
) -> Result<ResidualReport, ValueError> {
    let mut buf = Vec::new();
    let mut max_abs = 0.0f64;
    let mut sum_abs = 0.0f64;
    for x in states {
        let u = policy(x);
        let mut expected = 0.0;
        match ens.exact_mixture_successors(x, &u)? {
            Some(list) => {
                for (succ, p) in list {
                    expected += p * v.evaluate_clamped(&succ, &mut buf);
                }
            }
            None => {
                let draws = ens.sample_next_states(x, &u, mc.noise_samples.max(1), rng)?;
                for succ in &draws {
                    expected += v.evaluate_clamped(succ, &mut buf);
                }
                expected /= draws.len() as f64;
            }
        }
        let r = v.evaluate_clamped(x, &mut buf) - spec.cost(x) - spec.gamma * expected;
        max_abs = max_abs.max(r.abs());
        sum_abs += r.abs();
    }
    Ok(ResidualReport {
        max_abs,
        mean_abs: sum_abs / states.len().max(1) as f64,
        states: states.len(),
    })
}

/// Largest sublevel threshold excluding the sampled unsafe states, shrunk by
/// a multiplicative margin: `(1 - margin) * min V over unsafe samples`.
pub fn exclusion_level_on(
    v: &ValueFunction,
    spec: &SafetySpec,
    unsafe_states: &[Vec<f64>],
    margin_fraction: f64,
) -> Result<f64, ValueError> {
    let mut buf = Vec::new();
    let mut min_v = f64::INFINITY;
    let mut found = false;
    for x in unsafe_states {
        if spec.is_safe(x) || !v.grid().bounds().contains(x, 1e-9) {
            continue;
        }
        found = true;
        min_v = min_v.min(v.evaluate_clamped(x, &mut buf));
    }
    if !found {
        return Err(ValueError::NoUnsafeStates);
    }
    if min_v <= 0.0 {
        return Err(ValueError::NonPositiveLevel { min: min_v });
    }
    Ok((1.0 - margin_fraction) * min_v)
}

/// Sampling front end for `exclusion_level_on`: rejection-samples unsafe
/// states uniformly from the value function's own domain box.
pub fn exclusion_level(
    v: &ValueFunction,
    spec: &SafetySpec,
    n: usize,
    margin_fraction: f64,
    rng: &mut Rng,
) -> Result<f64, ValueError> {
    let mut states = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let max_attempts = n.saturating_mul(50).max(1000);
    while states.len() < n && attempts < max_attempts {
        attempts += 1;
        let x = v.grid().bounds().sample_uniform(rng);
        if !spec.is_safe(&x) {
            states.push(x);
        }
    }
    exclusion_level_on(v, spec, &states, margin_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{NoiseSpec, StateVec, SystemSpec, TransitionFamily};
    use crate::grid::BoxBounds;
    use crate::rng::{substream, Stream};
    use crate::safety::{CostForm, SafeSetForm};
    use proptest::prelude::*;

    fn meta() -> ValueMeta {
        ValueMeta {
            policy_id: "test".into(),
            gamma: 0.9,
            ensemble_id: "test".into(),
            converged: true,
            sweeps: 0,
            residual: 0.0,
        }
    }

    fn line_grid(n: usize) -> Grid {
        Grid::new(BoxBounds::scalar(0.0, 1.0), vec![n]).unwrap()
    }

    #[test]
    fn node_queries_return_stored_values() {
        let g = line_grid(5);
        let table = vec![1.0, 3.0, 2.0, 8.0, 5.0];
        let v = ValueFunction::new(g.clone(), table.clone(), OutOfBox::Error, meta());
        for (i, t) in table.iter().enumerate() {
            let x = g.node_state(i);
            assert_eq!(v.evaluate(&x).unwrap(), *t);
        }
    }

    #[test]
    fn midpoint_is_arithmetic_mean() {
        let v = ValueFunction::new(line_grid(2), vec![1.0, 3.0], OutOfBox::Error, meta());
        assert!((v.evaluate(&[0.5]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_domain_policy() {
        let v = ValueFunction::new(line_grid(2), vec![1.0, 3.0], OutOfBox::Error, meta());
        assert!(matches!(
            v.evaluate(&[1.5]),
            Err(ValueError::OutOfDomain(_))
        ));
        let v = ValueFunction::new(line_grid(2), vec![1.0, 3.0], OutOfBox::Clamp, meta());
        assert_eq!(v.evaluate(&[1.5]).unwrap(), 3.0);
    }

    #[test]
    fn refinement_gap_bounded_by_lipschitz_modulus() {
        // f is 2-Lipschitz on [0, 1]; coarse and fine tables sample f exactly,
        // so interpolants differ by at most L * h_coarse.
        let f = |x: f64| (3.0 * x).sin().abs() * 0.5 + x;
        let lip = 2.0f64;
        let fill = |g: &Grid| -> Vec<f64> { (0..g.node_count()).map(|i| f(g.node_state(i)[0])).collect() };
        let coarse_grid = line_grid(9);
        let fine_grid = line_grid(129);
        let coarse = ValueFunction::new(coarse_grid.clone(), fill(&coarse_grid), OutOfBox::Clamp, meta());
        let fine = ValueFunction::new(fine_grid.clone(), fill(&fine_grid), OutOfBox::Clamp, meta());
        let h = coarse_grid.spacing(0);
        let mut rng = substream(3, Stream::PolicyEval, 0);
        let mut buf = Vec::new();
        for _ in 0..500 {
            let x = coarse.grid().bounds().sample_uniform(&mut rng);
            let gap = (coarse.evaluate_clamped(&x, &mut buf) - fine.evaluate_clamped(&x, &mut buf)).abs();
            assert!(gap <= lip * h + 1e-12, "gap {gap} at {x:?}");
        }
    }

    fn contraction_ensemble(sigma: f64) -> ModelEnsemble {
        let sys = SystemSpec {
            name: "lin".into(),
            params: vec![0.6, 0.0],
            family: TransitionFamily::Linear1d,
            noise: if sigma == 0.0 {
                NoiseSpec::degenerate(1)
            } else {
                NoiseSpec::gaussian(vec![sigma])
            },
            state_box: BoxBounds::scalar(-2.0, 2.0),
            control_box: BoxBounds::scalar(-1.0, 1.0),
        };
        ModelEnsemble::single(sys, 0).unwrap()
    }

    #[test]
    fn zero_cost_gives_zero_value() {
        let ens = contraction_ensemble(0.1);
        let spec = SafetySpec::new(
            SafeSetForm::AbsBound { index: 0, bound: 1.0 },
            CostForm::Hinge { weights: vec![0.0], offset: 0.0 },
            1.0,
            0.9,
        )
        .unwrap();
        let grid = Grid::new(BoxBounds::scalar(-2.0, 2.0), vec![21]).unwrap();
        let mut rng = substream(0, Stream::PolicyEval, 0);
        let v = evaluate_policy(
            &ens,
            |_| ControlVec(vec![0.0]),
            "zero",
            &spec,
            &grid,
            &McConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(v.meta.converged);
        assert!(v.table().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn deterministic_contraction_matches_geometric_series() {
        // x+ = 0.6 x, c(x) = x^2: V(x) = x^2 * sum (0.9 * 0.36)^k = x^2 / (1 - 0.324).
        let ens = contraction_ensemble(0.0);
        let spec = SafetySpec::new(
            SafeSetForm::AbsBound { index: 0, bound: 1.0 },
            CostForm::Quadratic { weights: vec![1.0] },
            1.0,
            0.9,
        )
        .unwrap();
        let grid = Grid::new(BoxBounds::scalar(-2.0, 2.0), vec![2001]).unwrap();
        let mut rng = substream(0, Stream::PolicyEval, 1);
        let mc = McConfig { tol: 1e-10, ..McConfig::default() };
        let v = evaluate_policy(
            &ens,
            |_| ControlVec(vec![0.0]),
            "zero",
            &spec,
            &grid,
            &mc,
            &mut rng,
        )
        .unwrap();
        let expected = 1.0 / (1.0 - 0.9 * 0.36);
        let got = v.evaluate(&[1.0]).unwrap();
        assert!(
            (got - expected).abs() / expected < 5e-3,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn value_exceeds_immediate_cost_at_nodes() {
        let ens = contraction_ensemble(0.05);
        let spec = SafetySpec::new(
            SafeSetForm::AbsBound { index: 0, bound: 1.0 },
            CostForm::AbsHinge { index: 0, threshold: 0.5 },
            0.5,
            0.9,
        )
        .unwrap();
        let grid = Grid::new(BoxBounds::scalar(-2.0, 2.0), vec![81]).unwrap();
        let mut rng = substream(0, Stream::PolicyEval, 2);
        let v = evaluate_policy(
            &ens,
            |_| ControlVec(vec![0.0]),
            "zero",
            &spec,
            &grid,
            &McConfig::default(),
            &mut rng,
        )
        .unwrap();
        for node in 0..grid.node_count() {
            let x = grid.node_state(node);
            assert!(v.node_value(node) >= spec.cost(&x) - 1e-9);
        }
    }

    #[test]
    fn exclusion_level_trivial_cases() {
        let g = line_grid(3);
        let v = ValueFunction::new(g, vec![0.2, 1.0, 4.0], OutOfBox::Clamp, meta());
        let spec = SafetySpec::new(
            SafeSetForm::AbsBound { index: 0, bound: 0.6 },
            CostForm::AbsHinge { index: 0, threshold: 0.1 },
            0.5,
            0.9,
        )
        .unwrap();
        // Single unsafe state at x = 1.0 with V = 4.0 and zero margin.
        let level = exclusion_level_on(&v, &spec, &[vec![1.0]], 0.0).unwrap();
        assert_eq!(level, 4.0);
        let level = exclusion_level_on(&v, &spec, &[vec![1.0]], 0.02).unwrap();
        assert!((level - 0.98 * 4.0).abs() < 1e-12);
        // Safe-only samples are an error.
        assert!(matches!(
            exclusion_level_on(&v, &spec, &[vec![0.0]], 0.0),
            Err(ValueError::NoUnsafeStates)
        ));
    }

    #[test]
    fn nonpositive_level_detected() {
        let g = line_grid(3);
        let v = ValueFunction::new(g, vec![0.0, 0.0, 0.0], OutOfBox::Clamp, meta());
        let spec = SafetySpec::new(
            SafeSetForm::AbsBound { index: 0, bound: 0.6 },
            CostForm::AbsHinge { index: 0, threshold: 0.1 },
            0.5,
            0.9,
        )
        .unwrap();
        assert!(matches!(
            exclusion_level_on(&v, &spec, &[vec![1.0]], 0.0),
            Err(ValueError::NonPositiveLevel { .. })
        ));
    }

    #[test]
    fn sublevel_extremes() {
        let g = line_grid(4);
        let v = ValueFunction::new(g, vec![1.0, 2.0, 3.0, 4.0], OutOfBox::Clamp, meta());
        assert_eq!(sublevel_members(&v, 4.0).unwrap().nodes, vec![0, 1, 2, 3]);
        assert!(matches!(
            sublevel_members(&v, 0.5),
            Err(ValueError::EmptySublevelSet { .. })
        ));
    }

    #[test]
    fn value_file_round_trip() {
        let g = line_grid(4);
        let v = ValueFunction::new(g, vec![1.0, 2.0, 3.0, 4.0], OutOfBox::Clamp, meta());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        v.save(&path).unwrap();
        assert_eq!(ValueFunction::load(&path).unwrap(), v);
    }

    proptest! {
        #[test]
        fn sublevel_sets_are_nested(
            table in proptest::collection::vec(0.0f64..10.0, 4..32),
            a in 0.0f64..10.0,
            b in 0.0f64..10.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let g = Grid::new(BoxBounds::scalar(0.0, 1.0), vec![table.len()]).unwrap();
            let v = ValueFunction::new(g, table, OutOfBox::Clamp, meta());
            let small = sublevel_members(&v, lo).map(|s| s.nodes).unwrap_or_default();
            let large = sublevel_members(&v, hi).map(|s| s.nodes).unwrap_or_default();
            for node in &small {
                prop_assert!(large.contains(node));
            }
        }

        #[test]
        fn interpolation_stays_within_node_range(
            table in proptest::collection::vec(0.0f64..10.0, 8),
            x in 0.0f64..1.0,
        ) {
            let g = Grid::new(BoxBounds::scalar(0.0, 1.0), vec![8]).unwrap();
            let lo = table.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = table.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let v = ValueFunction::new(g, table, OutOfBox::Clamp, meta());
            let val = v.evaluate(&[x]).unwrap();
            prop_assert!(val >= lo - 1e-12 && val <= hi + 1e-12);
        }
    }

    #[test]
    fn monte_carlo_rule_is_seed_deterministic() {
        let ens = contraction_ensemble(0.1);
        let spec = SafetySpec::new(
            SafeSetForm::AbsBound { index: 0, bound: 1.0 },
            CostForm::AbsHinge { index: 0, threshold: 0.5 },
            0.5,
            0.9,
        )
        .unwrap();
        let grid = Grid::new(BoxBounds::scalar(-2.0, 2.0), vec![41]).unwrap();
        let mc = McConfig {
            rule: NoiseRule::MonteCarlo,
            ..McConfig::default()
        };
        let run = || {
            let mut rng = substream(5, Stream::PolicyEval, 0);
            evaluate_policy(&ens, |_| ControlVec(vec![0.0]), "z", &spec, &grid, &mc, &mut rng)
                .unwrap()
        };
        assert_eq!(run().table(), run().table());
    }

    #[test]
    fn residual_of_perturbed_fixed_point_is_visible() {
        // Deterministic contraction x+ = 0.6x with quadratic cost: compute V,
        // then bump one node and confirm the residual there is ~ the bump.
        let ens = contraction_ensemble(0.0);
        let spec = SafetySpec::new(
            SafeSetForm::AbsBound { index: 0, bound: 1.0 },
            CostForm::Quadratic { weights: vec![1.0] },
            1.0,
            0.9,
        )
        .unwrap();
        let grid = Grid::new(BoxBounds::scalar(-2.0, 2.0), vec![201]).unwrap();
        let mut rng = substream(0, Stream::PolicyEval, 3);
        let mc = McConfig { tol: 1e-12, ..McConfig::default() };
        let v = evaluate_policy(&ens, |_| ControlVec(vec![0.0]), "z", &spec, &grid, &mc, &mut rng)
            .unwrap();
        let states: Vec<Vec<f64>> = (0..grid.node_count()).map(|i| grid.node_state(i)).collect();
        let report =
            bellman_residual(&v, &ens, |_| ControlVec(vec![0.0]), &spec, &states, &mc, &mut rng)
                .unwrap();
        assert!(report.max_abs < 1e-6, "max residual {}", report.max_abs);

        let mut bumped = v.clone();
        let mid = grid.node_count() / 2;
        let mut table = bumped.table().to_vec();
        table[mid] += 1.0;
        bumped = ValueFunction::new(grid.clone(), table, OutOfBox::Clamp, meta());
        let report = bellman_residual(
            &bumped,
            &ens,
            |_| ControlVec(vec![0.0]),
            &spec,
            &[grid.node_state(mid)],
            &mc,
            &mut rng,
        )
        .unwrap();
        // x = 0 maps to itself, so the residual is 1 - gamma * (self weight 1).
        assert!((report.max_abs - (1.0 - 0.9)).abs() < 1e-6);
    }

    #[test]
    fn zero_value_nonzero_cost_has_large_residual() {
        let ens = contraction_ensemble(0.0);
        let spec = SafetySpec::new(
            SafeSetForm::AbsBound { index: 0, bound: 1.0 },
            CostForm::AbsHinge { index: 0, threshold: 0.5 },
            0.5,
            0.9,
        )
        .unwrap();
        let grid = Grid::new(BoxBounds::scalar(-2.0, 2.0), vec![21]).unwrap();
        let v = ValueFunction::new(grid.clone(), vec![0.0; 21], OutOfBox::Clamp, meta());
        let mut rng = substream(0, Stream::PolicyEval, 4);
        let report = bellman_residual(
            &v,
            &ens,
            |_| ControlVec(vec![0.0]),
            &spec,
            &[vec![2.0]],
            &McConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.max_abs >= 0.5);
    }

    #[test]
    fn rollout_states_project_into_value_domain() {
        // Sanity: StateVec derefs into slices accepted by evaluate.
        let g = line_grid(3);
        let v = ValueFunction::new(g, vec![1.0, 2.0, 3.0], OutOfBox::Clamp, meta());
        let s = StateVec(vec![0.25]);
        let mut buf = Vec::new();
        assert!((v.evaluate_clamped(&s, &mut buf) - 1.5).abs() < 1e-12);
    }
}
