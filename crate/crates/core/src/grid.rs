//! Tensor-product state grids and multilinear interpolation.
//!
//! Outside the box values are extended linearly from the boundary cell, which
//! keeps linear-growth fields linear instead of clamping them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub axes: Vec<Vec<f64>>,
}

impl StateGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Dimension("state grid needs at least one axis".into()));
        }
        for (i, a) in axes.iter().enumerate() {
            if a.len() < 2 {
                return Err(Error::Config(format!("axis {i} needs at least two nodes")));
            }
            if a.windows(2).any(|w| !(w[1] > w[0])) || a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("axis {i} nodes must be finite and strictly increasing")));
            }
        }
        Ok(Self { axes })
    }

    /// Uniform grid on `[lo_i, hi_i]` with `counts[i]` nodes per axis.
    pub fn uniform(lo: &[f64], hi: &[f64], counts: &[usize]) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != counts.len() {
            return Err(Error::Dimension("uniform grid: inconsistent box".into()));
        }
        let axes = (0..lo.len())
            .map(|i| {
                let c = counts[i].max(2);
                (0..c)
                    .map(|j| {
                        if j == c - 1 {
                            hi[i]
                        } else {
                            lo[i] + (hi[i] - lo[i]) * j as f64 / (c - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(axes)
    }

    /// Cube `[-half_width, half_width]^n` with `nodes` points per axis.
    pub fn cube(n: usize, half_width: f64, nodes: usize) -> Result<Self> {
        Self::uniform(&vec![-half_width; n], &vec![half_width; n], &vec![nodes; n])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[0]).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[a.len() - 1]).collect()
    }

    /// Largest spacing over all axes.
    pub fn max_spacing(&self) -> f64 {
        self.axes
            .iter()
            .flat_map(|a| a.windows(2).map(|w| w[1] - w[0]))
            .fold(0.0, f64::max)
    }

    /// Smallest spacing along one axis.
    pub fn min_spacing(&self, axis: usize) -> f64 {
        self.axes[axis]
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    /// Multi-index of a flat node index (last axis fastest).
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            let c = self.axes[a].len();
            idx[a] = flat % c;
            flat /= c;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (i, a)| acc * a.len() + i)
    }

    /// Stride of an axis in the flat layout.
    pub fn stride(&self, axis: usize) -> usize {
        self.axes[axis + 1..].iter().map(Vec::len).product()
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.node_into(flat, &mut out);
        out
    }

    pub fn node_into(&self, mut flat: usize, out: &mut [f64]) {
        for a in (0..self.dim()).rev() {
            let c = self.axes[a].len();
            out[a] = self.axes[a][flat % c];
            flat /= c;
        }
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.axes)
            .all(|(xi, a)| *xi >= a[0] && *xi <= a[a.len() - 1])
    }

    /// Whether a node lies at least `layers` nodes away from every face.
    pub fn is_interior(&self, flat: usize, layers: usize) -> bool {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .all(|(i, a)| *i >= layers && *i + layers < a.len())
    }

    /// Grid with every cell split in two.
    pub fn refined(&self) -> Self {
        let axes = self
            .axes
            .iter()
            .map(|a| {
                let mut out = Vec::with_capacity(2 * a.len() - 1);
                for w in a.windows(2) {
                    out.push(w[0]);
                    out.push(0.5 * (w[0] + w[1]));
                }
                out.push(a[a.len() - 1]);
                out
            })
            .collect();
        Self { axes }
    }

    /// Grid whose nodes are moved by `fraction` of the local spacing
    /// (node count unchanged, last node moved with the last cell).
    pub fn shifted(&self, fraction: f64) -> Self {
        let axes = self
            .axes
            .iter()
            .map(|a| {
                let n = a.len();
                (0..n)
                    .map(|j| {
                        let h = if j + 1 < n { a[j + 1] - a[j] } else { a[j] - a[j - 1] };
                        a[j] + fraction * h
                    })
                    .collect()
            })
            .collect();
        Self { axes }
    }

    /// Cell index and (possibly extrapolating) local coordinate along an axis.
    #[inline]
    fn locate(axis: &[f64], x: f64) -> (usize, f64) {
        let n = axis.len();
        let j = axis.partition_point(|a| *a <= x);
        let i = j.saturating_sub(1).min(n - 2);
        let s = (x - axis[i]) / (axis[i + 1] - axis[i]);
        (i, s)
    }

    /// Multilinear interpolation of node values, linear extrapolation outside.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        if self.dim() == 1 {
            let (i, s) = Self::locate(&self.axes[0], x[0]);
            return values[i] + s * (values[i + 1] - values[i]);
        }
        let d = self.dim();
        let mut base = 0usize;
        let mut cell = [(0usize, 0.0f64); 8];
        let mut cells_heap;
        let cells: &mut [(usize, f64)] = if d <= 8 {
            &mut cell[..d]
        } else {
            cells_heap = vec![(0usize, 0.0f64); d];
            &mut cells_heap
        };
        for a in 0..d {
            let (i, s) = Self::locate(&self.axes[a], x[a]);
            cells[a] = (self.stride(a), s);
            base = base * self.axes[a].len() + i;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut offset = 0;
            for (a, (stride, s)) in cells.iter().enumerate() {
                if corner >> (d - 1 - a) & 1 == 1 {
                    w *= s;
                    offset += stride;
                } else {
                    w *= 1.0 - s;
                }
            }
            acc += w * values[base + offset];
        }
        acc
    }

    /// Interpolation weights, for monotonicity diagnostics.
    pub fn interpolation_weights(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let d = self.dim();
        let mut base = 0usize;
        let mut cells = Vec::with_capacity(d);
        for a in 0..d {
            let (i, s) = Self::locate(&self.axes[a], x[a]);
            cells.push((self.stride(a), s));
            base = base * self.axes[a].len() + i;
        }
        (0..(1usize << d))
            .map(|corner| {
                let mut w = 1.0;
                let mut offset = 0;
                for (a, (stride, s)) in cells.iter().enumerate() {
                    if corner >> (d - 1 - a) & 1 == 1 {
                        w *= s;
                        offset += stride;
                    } else {
                        w *= 1.0 - s;
                    }
                }
                (base + offset, w)
            })
            .collect()
    }
}

/// A real function of the state, sampled or analytic.
pub trait FieldSlice: Sync {
    fn eval(&self, x: &[f64]) -> f64;
}

/// Node values on a grid, read by interpolation.
#[derive(Debug, Clone, Copy)]
pub struct GridField<'a> {
    pub grid: &'a StateGrid,
    pub values: &'a [f64],
}

impl FieldSlice for GridField<'_> {
    fn eval(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(self.values, x)
    }
}

/// Wraps a closure as a field.
pub struct FnField<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> FieldSlice for FnField<F> {
    fn eval(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn flat_and_multi_index_agree() {
        let g = StateGrid::uniform(&[0.0, -1.0], &[1.0, 1.0], &[3, 5]).unwrap();
        assert_eq!(g.len(), 15);
        for i in 0..g.len() {
            assert_eq!(g.flat_index(&g.multi_index(i)), i);
        }
        assert_eq!(g.node(7), vec![0.5, 0.0]);
        assert_eq!(g.stride(0), 5);
    }

    #[test]
    fn refinement_keeps_old_nodes() {
        let g = StateGrid::cube(1, 2.0, 5).unwrap();
        let r = g.refined();
        assert_eq!(r.len(), 9);
        assert_eq!(r.axes[0][2], g.axes[0][1]);
        assert_abs_diff_eq!(r.max_spacing(), 0.5, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn affine_functions_are_reproduced_everywhere(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
            x in -20.0f64..20.0, y in -20.0f64..20.0,
        ) {
            let g = StateGrid::uniform(&[-2.0, -1.0], &[2.0, 3.0], &[7, 4]).unwrap();
            let values: Vec<f64> = g.nodes().iter().map(|p| a + b * p[0] + c * p[1]).collect();
            let got = g.interpolate(&values, &[x, y]);
            prop_assert!((got - (a + b * x + c * y)).abs() <= 1e-11 * (1.0 + got.abs()));
        }

        #[test]
        fn interior_weights_are_a_partition_of_unity(x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let g = StateGrid::cube(2, 1.0, 6).unwrap();
            let w = g.interpolation_weights(&[x, y]);
            prop_assert!(w.iter().all(|(_, wi)| *wi >= -1e-15));
            prop_assert!((w.iter().map(|(_, wi)| wi).sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn nodes_are_interpolated_exactly() {
        let g = StateGrid::cube(1, 1.0, 9).unwrap();
        let values: Vec<f64> = g.nodes().iter().map(|p| p[0].sin()).collect();
        for (i, p) in g.nodes().iter().enumerate() {
            assert_eq!(g.interpolate(&values, p), values[i]);
        }
    }
}
