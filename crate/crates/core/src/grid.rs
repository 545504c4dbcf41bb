//! Axis-aligned boxes and regular grids with multilinear interpolation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("bounds arrays differ in length ({lo} vs {hi})")]
    MismatchedBounds { lo: usize, hi: usize },
    #[error("invalid bounds on axis {axis}: lo={lo}, hi={hi}")]
    InvalidBounds { axis: usize, lo: f64, hi: f64 },
    #[error("grid shape has {shape} axes but bounds have {dim}")]
    MismatchedShape { shape: usize, dim: usize },
    #[error("axis {axis} has zero nodes")]
    EmptyAxis { axis: usize },
    #[error("point has dimension {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Axis-aligned box; `lo[i] <= hi[i]` on every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, GridError> {
        if lo.len() != hi.len() {
            return Err(GridError::MismatchedBounds {
                lo: lo.len(),
                hi: hi.len(),
            });
        }
        for (axis, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() || l > h {
                return Err(GridError::InvalidBounds { axis, lo: l, hi: h });
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn scalar(lo: f64, hi: f64) -> Self {
        Self::new(vec![lo], vec![hi]).expect("scalar bounds")
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }

    pub fn clamped(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.clamp(&mut out);
        out
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .enumerate()
                .all(|(i, &v)| v >= self.lo[i] - tol && v <= self.hi[i] + tol)
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| 0.5 * (h - l))
            .collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| 0.5 * (l + h))
            .collect()
    }

    pub fn diagonal(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| (h - l) * (h - l))
            .sum::<f64>()
            .sqrt()
    }

    pub fn sample_uniform(&self, rng: &mut Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| {
                if l == h {
                    l
                } else {
                    rng.random_range(l..h)
                }
            })
            .collect()
    }
}

/// Regular grid over a box. Interpolation is multilinear; axes with a single
/// node are treated as constant along that axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    bounds: BoxBounds,
    shape: Vec<usize>,
}

impl Grid {
    pub fn new(bounds: BoxBounds, shape: Vec<usize>) -> Result<Self, GridError> {
        if shape.len() != bounds.dim() {
            return Err(GridError::MismatchedShape {
                shape: shape.len(),
                dim: bounds.dim(),
            });
        }
        for (axis, &n) in shape.iter().enumerate() {
            if n == 0 {
                return Err(GridError::EmptyAxis { axis });
            }
        }
        Ok(Self { bounds, shape })
    }

    pub fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn node_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Node spacing on one axis; zero when the axis has a single node.
    pub fn spacing(&self, axis: usize) -> f64 {
        let n = self.shape[axis];
        if n <= 1 {
            0.0
        } else {
            (self.bounds.hi[axis] - self.bounds.lo[axis]) / (n - 1) as f64
        }
    }

    pub fn node_coord(&self, axis: usize, i: usize) -> f64 {
        if self.shape[axis] <= 1 {
            0.5 * (self.bounds.lo[axis] + self.bounds.hi[axis])
        } else {
            self.bounds.lo[axis] + self.spacing(axis) * i as f64
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut flat = 0;
        for (axis, &i) in multi.iter().enumerate() {
            flat = flat * self.shape[axis] + i;
        }
        flat
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut multi = vec![0; self.dim()];
        for axis in (0..self.dim()).rev() {
            multi[axis] = flat % self.shape[axis];
            flat /= self.shape[axis];
        }
        multi
    }

    pub fn node_state(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(axis, &i)| self.node_coord(axis, i))
            .collect()
    }

    /// Multilinear interpolation stencil for a point already inside (or
    /// clamped to) the box: up to 2^d (node, weight) entries with weights
    /// summing to one. Zero-weight corners are dropped, so a query exactly on
    /// a node returns that single node with weight one.
    pub fn stencil(&self, x: &[f64], out: &mut Vec<(usize, f64)>) -> Result<(), GridError> {
        if x.len() != self.dim() {
            return Err(GridError::DimensionMismatch {
                got: x.len(),
                expected: self.dim(),
            });
        }
        out.clear();
        let d = self.dim();
        let mut cell = [0usize; 8];
        let mut frac = [0f64; 8];
        assert!(d <= 8, "grids beyond 8 axes are not supported");
        for axis in 0..d {
            let n = self.shape[axis];
            if n == 1 {
                cell[axis] = 0;
                frac[axis] = 0.0;
                continue;
            }
            let h = self.spacing(axis);
            let t = ((x[axis] - self.bounds.lo[axis]) / h).clamp(0.0, (n - 1) as f64);
            let c = (t.floor() as usize).min(n - 2);
            cell[axis] = c;
            frac[axis] = (t - c as f64).clamp(0.0, 1.0);
        }
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut multi_flat = 0usize;
            for axis in 0..d {
                let up = (corner >> axis) & 1 == 1;
                let w = if up { frac[axis] } else { 1.0 - frac[axis] };
                if w == 0.0 {
                    weight = 0.0;
                    break;
                }
                weight *= w;
                let idx = cell[axis] + if up { 1 } else { 0 };
                multi_flat = multi_flat * self.shape[axis]
                    + if self.shape[axis] == 1 { 0 } else { idx };
            }
            if weight > 0.0 {
                out.push((multi_flat, weight));
            }
        }
        Ok(())
    }
}
