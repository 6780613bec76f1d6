//! Backward solver for BSDEs with jumps on a state grid or on the exact
//! outcome tree, the one-block backward semigroup, and harnesses for the
//! comparison theorem, the stability estimate and the Markov identity.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ControlPolicy, PolicyContext};
use crate::grid::{FieldSlice, StateGrid};
use crate::levy_paths::{sample_paths, LevyMeasure, TimeGrid};
use crate::oracle::TreeSolver;
use crate::problem::{Dims, GameCoefficients, ProblemSpec};
use crate::step::{backward_step, check_step_size, StepCoefficients, StepRule, StepValue};

pub const DEFAULT_GAUSS: usize = 5;
pub const DEFAULT_TOLERANCE: f64 = 1e-15;

/// How conditional expectations are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    /// Quadrature with multilinear interpolation on the state grid.
    QuadratureGrid,
    /// Exact recursion over the remaining outcome tree at every node.
    TreeOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Engine {
    pub mode: EngineMode,
    /// Gauss–Hermite order per Brownian dimension.
    pub gauss: usize,
    /// Relative tolerance of the implicit `y` fixed point.
    pub tol: f64,
}

impl Engine {
    pub fn grid(gauss: usize) -> Self {
        Self {
            mode: EngineMode::QuadratureGrid,
            gauss,
            tol: DEFAULT_TOLERANCE,
        }
    }

    pub fn tree(gauss: usize) -> Self {
        Self {
            mode: EngineMode::TreeOracle,
            gauss,
            tol: DEFAULT_TOLERANCE,
        }
    }
}

impl Default for Engine {
    fn default() -> Self {
        Self::grid(DEFAULT_GAUSS)
    }
}

/// Discrete `(Y, Z, K)` on `time grid x state grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub sgrid: StateGrid,
    pub d: usize,
    pub n_atoms: usize,
    /// `y[k][node]`, `k = 0..=n_steps`.
    pub y: Vec<Vec<f64>>,
    /// `z[k][node * d + j]`, `k < n_steps`.
    pub z: Vec<Vec<f64>>,
    /// `k_bar[k][node]`.
    pub k_bar: Vec<Vec<f64>>,
    /// `k[k][node * n_atoms + i]`.
    pub k: Vec<Vec<f64>>,
}

impl BsdeSolution {
    pub fn y_at(&self, step: usize, x: &[f64]) -> f64 {
        self.sgrid.interpolate(&self.y[step], x)
    }

    pub fn z_at(&self, step: usize, x: &[f64]) -> Vec<f64> {
        let nodes = self.sgrid.len();
        (0..self.d)
            .map(|j| {
                let col: Vec<f64> = (0..nodes).map(|i| self.z[step][i * self.d + j]).collect();
                self.sgrid.interpolate(&col, x)
            })
            .collect()
    }

    pub fn k_bar_at(&self, step: usize, x: &[f64]) -> f64 {
        self.sgrid.interpolate(&self.k_bar[step], x)
    }
}

fn select_feedback(
    spec: &ProblemSpec,
    u_policy: &dyn ControlPolicy,
    v_policy: &dyn ControlPolicy,
    step: usize,
    time: f64,
    x: &[f64],
) -> Result<(usize, usize)> {
    if u_policy.reacts() || v_policy.reacts() {
        return Err(Error::Config("BSDE solves take feedback policies only".into()));
    }
    let ctx = PolicyContext {
        step,
        time,
        state: x,
        opponent: None,
        bundle: None,
    };
    let (u, v) = (u_policy.select(&ctx), v_policy.select(&ctx));
    if u >= spec.u_set.len() || v >= spec.v_set.len() {
        return Err(Error::Config(format!("policy index out of range (u={u}, v={v})")));
    }
    Ok((u, v))
}

fn check_grid_dims(spec: &ProblemSpec, sgrid: &StateGrid, grid: &TimeGrid) -> Result<()> {
    if sgrid.dim() != spec.n() {
        return Err(Error::Dimension(format!(
            "state grid has dimension {}, problem has {}",
            sgrid.dim(),
            spec.n()
        )));
    }
    if grid.horizon > spec.horizon * (1.0 + 1e-12) {
        return Err(Error::Domain("time grid extends beyond the horizon".into()));
    }
    Ok(())
}

/// Backward recursion for fixed feedback policies with terminal datum
/// `terminal` at the end of `grid`.
pub fn solve_bsde(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    sgrid: &StateGrid,
    u_policy: &dyn ControlPolicy,
    v_policy: &dyn ControlPolicy,
    terminal: &dyn FieldSlice,
    engine: &Engine,
) -> Result<BsdeSolution> {
    check_grid_dims(spec, sgrid, grid)?;
    check_step_size(spec, grid.dt())?;
    let nodes = sgrid.nodes();
    let n = grid.n_steps;
    let d = spec.d();
    let na = spec.levy.len();
    let terminal_values: Vec<f64> = nodes.par_iter().map(|x| terminal.eval(x)).collect();
    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n];
    let mut k_bar = vec![Vec::new(); n];
    let mut k_atoms = vec![Vec::new(); n];
    y[n] = terminal_values;

    let store = |step: usize, vals: Vec<StepValue>, y: &mut Vec<Vec<f64>>, z: &mut Vec<Vec<f64>>, kb: &mut Vec<Vec<f64>>, ka: &mut Vec<Vec<f64>>| {
        y[step] = vals.iter().map(|v| v.y).collect();
        z[step] = vals.iter().flat_map(|v| v.z.iter().copied()).collect();
        kb[step] = vals.iter().map(|v| v.k_bar).collect();
        ka[step] = vals.iter().flat_map(|v| v.k.iter().copied()).collect();
    };

    match engine.mode {
        EngineMode::QuadratureGrid => {
            let rule = StepRule::new(&spec.levy, d, engine.gauss, grid.dt())?;
            for k in (0..n).rev() {
                let t = grid.time(k);
                let next = &y[k + 1];
                let vals: Vec<StepValue> = nodes
                    .par_iter()
                    .map(|x| {
                        let (ui, vi) = select_feedback(spec, u_policy, v_policy, k, t, x)?;
                        backward_step(spec, &rule, t, x, spec.u_set.point(ui), spec.v_set.point(vi), engine.tol, |c| {
                            Ok(if k + 1 == n {
                                terminal.eval(c)
                            } else {
                                sgrid.interpolate(next, c)
                            })
                        })
                    })
                    .collect::<Result<_>>()?;
                store(k, vals, &mut y, &mut z, &mut k_bar, &mut k_atoms);
            }
        }
        EngineMode::TreeOracle => {
            let solver = TreeSolver::new(spec, *grid, engine.gauss)?;
            let term = |x: &[f64]| terminal.eval(x);
            for k in (0..n).rev() {
                let vals: Vec<StepValue> = nodes
                    .par_iter()
                    .map(|x| solver.bsde(u_policy, v_policy, &term, k, x))
                    .collect::<Result<_>>()?;
                store(k, vals, &mut y, &mut z, &mut k_bar, &mut k_atoms);
            }
        }
    }
    Ok(BsdeSolution {
        grid: *grid,
        sgrid: sgrid.clone(),
        d,
        n_atoms: na,
        y,
        z,
        k_bar,
        k: k_atoms,
    })
}

/// `G_{t, t+δ_blk}[η]` at every node of `sgrid`, where `block` covers
/// `[t, t + δ_blk]`. `None` for `block` means an empty block (`G[η] = η`).
pub fn semigroup_apply(
    spec: &ProblemSpec,
    block: Option<&TimeGrid>,
    sgrid: &StateGrid,
    u_policy: &dyn ControlPolicy,
    v_policy: &dyn ControlPolicy,
    eta: &dyn FieldSlice,
    engine: &Engine,
) -> Result<Vec<f64>> {
    match block {
        None => Ok(sgrid.nodes().iter().map(|x| eta.eval(x)).collect()),
        Some(grid) => {
            let sol = solve_bsde(spec, grid, sgrid, u_policy, v_policy, eta, engine)?;
            Ok(sol.y.into_iter().next().unwrap_or_default())
        }
    }
}

/// `G_{t, t+δ_blk}[η](x)` at a single point; exact for the tree engine, and
/// for the grid engine computed on the block without any final interpolation.
pub fn semigroup_at(
    spec: &ProblemSpec,
    block: &TimeGrid,
    sgrid: &StateGrid,
    u_policy: &dyn ControlPolicy,
    v_policy: &dyn ControlPolicy,
    eta: &dyn FieldSlice,
    engine: &Engine,
    x: &[f64],
) -> Result<f64> {
    match engine.mode {
        EngineMode::TreeOracle => {
            let solver = TreeSolver::new(spec, *block, engine.gauss)?;
            let term = |c: &[f64]| eta.eval(c);
            Ok(solver.bsde(u_policy, v_policy, &term, 0, x)?.y)
        }
        EngineMode::QuadratureGrid => {
            check_step_size(spec, block.dt())?;
            let rule = StepRule::new(&spec.levy, spec.d(), engine.gauss, block.dt())?;
            let (ui, vi) = select_feedback(spec, u_policy, v_policy, 0, block.t0, x)?;
            if block.n_steps == 1 {
                let v = backward_step(spec, &rule, block.t0, x, spec.u_set.point(ui), spec.v_set.point(vi), engine.tol, |c| Ok(eta.eval(c)))?;
                return Ok(v.y);
            }
            let rest = block.slice(1, block.n_steps)?;
            let shifted = ShiftedSteps { inner: u_policy, offset: 1 };
            let shifted_v = ShiftedSteps { inner: v_policy, offset: 1 };
            let sol = solve_bsde(spec, &rest, sgrid, &shifted, &shifted_v, eta, engine)?;
            let v = backward_step(spec, &rule, block.t0, x, spec.u_set.point(ui), spec.v_set.point(vi), engine.tol, |c| Ok(sol.y_at(0, c)))?;
            Ok(v.y)
        }
    }
}

/// Re-indexes a policy for a sub-grid starting `offset` steps later.
pub(crate) struct ShiftedSteps<'a> {
    pub(crate) inner: &'a dyn ControlPolicy,
    pub(crate) offset: usize,
}

impl ControlPolicy for ShiftedSteps<'_> {
    fn select(&self, ctx: &PolicyContext<'_>) -> usize {
        self.inner.select(&PolicyContext {
            step: ctx.step + self.offset,
            ..*ctx
        })
    }
}

// ---------------------------------------------------------------------------
// Driver wrappers
// ---------------------------------------------------------------------------

type DriverClosure = Arc<dyn Fn(f64, &[f64], f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync>;

/// Forward coefficients of `inner` with a replaced driver.
#[derive(Clone)]
pub struct WithDriver {
    pub inner: Arc<dyn GameCoefficients>,
    pub driver: DriverClosure,
}

impl GameCoefficients for WithDriver {
    fn drift(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        self.inner.drift(t, x, u, v, out)
    }
    fn diffusion(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        self.inner.diffusion(t, x, u, v, out)
    }
    fn jump(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], e: &[f64], out: &mut [f64]) {
        self.inner.jump(t, x, u, v, e, out)
    }
    fn driver(&self, t: f64, x: &[f64], y: f64, z: &[f64], k: f64, u: &[f64], v: &[f64]) -> f64 {
        (self.driver)(t, x, y, z, k, u, v)
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        self.inner.terminal(x)
    }
    fn jump_weight(&self, x: &[f64], e: &[f64]) -> f64 {
        self.inner.jump_weight(x, e)
    }
    fn rho(&self, e: &[f64]) -> f64 {
        self.inner.rho(e)
    }
}

fn with_driver(spec: &ProblemSpec, driver: DriverClosure) -> ProblemSpec {
    let mut out = spec.clone();
    out.coefficients = Arc::new(WithDriver {
        inner: spec.coefficients.clone(),
        driver,
    });
    out.family = None;
    out
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub hypotheses_met: bool,
    /// Reasons the hypotheses failed, if any.
    pub notes: Vec<String>,
    /// `min (y - y')` over every visited `(step, node)`.
    pub min_difference: f64,
    pub root_difference: f64,
    /// `None` when the hypotheses are not met.
    pub passed: Option<bool>,
    pub tolerance: f64,
}

/// Probe settings for the comparison preconditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonProbe {
    pub n_probes: usize,
    pub x_box: f64,
    pub value_box: f64,
    pub seed: u64,
}

impl Default for ComparisonProbe {
    fn default() -> Self {
        Self {
            n_probes: 500,
            x_box: 3.0,
            value_box: 3.0,
            seed: 11,
        }
    }
}

fn check_comparison_hypotheses(a: &ProblemSpec, b: &ProblemSpec, probe: &ComparisonProbe) -> Vec<String> {
    let mut notes = Vec::new();
    if a.dims != b.dims || a.levy != b.levy || a.u_set != b.u_set || a.v_set != b.v_set {
        notes.push("problems differ in dimensions, Lévy measure or control sets".into());
        return notes;
    }
    let Dims { state: n, brownian: d, .. } = a.dims;
    let ca = a.coefficients.as_ref();
    let cb = b.coefficients.as_ref();
    let c = a.lipschitz_c.max(b.lipschitz_c);
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let (mut b1, mut b2) = (vec![0.0; n], vec![0.0; n]);
    let (mut s1, mut s2) = (vec![0.0; n * d], vec![0.0; n * d]);
    for _ in 0..probe.n_probes {
        let t = rng.random_range(0.0..=a.horizon);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-probe.x_box..=probe.x_box)).collect();
        let u = a.u_set.point(rng.random_range(0..a.u_set.len()));
        let v = a.v_set.point(rng.random_range(0..a.v_set.len()));
        ca.drift(t, &x, u, v, &mut b1);
        cb.drift(t, &x, u, v, &mut b2);
        ca.diffusion(t, &x, u, v, &mut s1);
        cb.diffusion(t, &x, u, v, &mut s2);
        if b1 != b2 || s1 != s2 {
            notes.push(format!("forward coefficients differ at t={t}, x={x:?}"));
            break;
        }
        for atom in &a.levy.atoms {
            ca.jump(t, &x, u, v, &atom.mark, &mut b1);
            cb.jump(t, &x, u, v, &atom.mark, &mut b2);
            if b1 != b2 {
                notes.push(format!("jump coefficients differ at x={x:?}"));
            }
            let cap = c * crate::levy_paths::mark_norm(&atom.mark).min(1.0);
            for (name, co) in [("first", ca), ("second", cb)] {
                let l = co.jump_weight(&x, &atom.mark);
                if !(0.0..=cap * (1.0 + 1e-12)).contains(&l) {
                    notes.push(format!("{name} problem: l={l} outside [0, C(1∧|e|)] at x={x:?}"));
                }
            }
        }
        let y = rng.random_range(-probe.value_box..=probe.value_box);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-probe.value_box..=probe.value_box)).collect();
        let k1 = rng.random_range(-probe.value_box..=probe.value_box);
        let k2 = rng.random_range(-probe.value_box..=probe.value_box);
        let fa = ca.driver(t, &x, y, &z, k1, u, v);
        let fb = cb.driver(t, &x, y, &z, k1, u, v);
        if fa < fb {
            notes.push(format!("g < g' at t={t}, x={x:?}, y={y}, k={k1}"));
        }
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        for (name, co) in [("first", ca), ("second", cb)] {
            if co.driver(t, &x, y, &z, lo, u, v) > co.driver(t, &x, y, &z, hi, u, v) {
                notes.push(format!("{name} driver decreasing in k at x={x:?}"));
            }
        }
        if notes.len() > 5 {
            break;
        }
    }
    notes.sort();
    notes.dedup();
    notes
}

/// Solves both problems on the shared tree and reports `min (y - y')`.
///
/// The terminal ordering `ξ ≥ ξ'` is checked at every leaf of the tree.
#[allow(clippy::too_many_arguments)]
pub fn comparison_check(
    spec_a: &ProblemSpec,
    xi_a: &dyn Fn(&[f64]) -> f64,
    spec_b: &ProblemSpec,
    xi_b: &dyn Fn(&[f64]) -> f64,
    grid: &TimeGrid,
    gauss: usize,
    u_policy: &dyn ControlPolicy,
    v_policy: &dyn ControlPolicy,
    x0: &[f64],
    probe: &ComparisonProbe,
    tolerance: f64,
) -> Result<ComparisonReport> {
    let mut notes = check_comparison_hypotheses(spec_a, spec_b, probe);
    let solver = TreeSolver::new(spec_a, *grid, gauss)?;
    let leaf_gap = std::cell::Cell::new(f64::INFINITY);
    let xi_diff = |x: &[f64]| {
        let g = xi_a(x) - xi_b(x);
        leaf_gap.set(leaf_gap.get().min(g));
        g
    };
    let zero = with_driver(spec_a, Arc::new(|_, _, _, _, _, _, _| 0.0));
    let mut min_diff = f64::INFINITY;
    let roots = solver.multi_bsde(
        &[spec_a, spec_b, &zero],
        &[xi_a, xi_b, &xi_diff],
        u_policy,
        v_policy,
        0,
        x0,
        &mut |node| {
            min_diff = min_diff.min(node.values[0].y - node.values[1].y);
        },
    )?;
    if leaf_gap.get() < 0.0 {
        notes.push(format!("terminal ordering violated: min(ξ - ξ') = {}", leaf_gap.get()));
    }
    let hypotheses_met = notes.is_empty();
    Ok(ComparisonReport {
        hypotheses_met,
        notes,
        min_difference: min_diff,
        root_difference: roots[0].y - roots[1].y,
        passed: hypotheses_met.then_some(min_diff >= -tolerance),
        tolerance,
    })
}

// ---------------------------------------------------------------------------
// Stability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub beta: f64,
    pub beta_threshold: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub passed: bool,
}

/// Smallest admissible weight `2 + 2C + 4C²`.
pub fn stability_beta_threshold(c: f64) -> f64 {
    2.0 + 2.0 * c + 4.0 * c * c
}

/// Both sides of the a-priori estimate for drivers `g + φ_1` and `g + φ_2`
/// with terminal values `ξ_1, ξ_2`, evaluated exactly on the tree at `t0`.
#[allow(clippy::too_many_arguments)]
pub fn stability_check(
    spec: &ProblemSpec,
    phi_1: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
    phi_2: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
    xi_1: &dyn Fn(&[f64]) -> f64,
    xi_2: &dyn Fn(&[f64]) -> f64,
    beta: f64,
    grid: &TimeGrid,
    gauss: usize,
    u_policy: &dyn ControlPolicy,
    v_policy: &dyn ControlPolicy,
    x0: &[f64],
) -> Result<StabilityReport> {
    let threshold = stability_beta_threshold(spec.lipschitz_c);
    if beta < threshold {
        return Err(Error::Config(format!(
            "β = {beta} is below 2 + 2C + 4C² = {threshold}"
        )));
    }
    let base = spec.coefficients.clone();
    let make = |phi: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>| {
        let base = base.clone();
        with_driver(
            spec,
            Arc::new(move |t, x, y, z, k, u, v| base.driver(t, x, y, z, k, u, v) + phi(t, x)),
        )
    };
    let spec_1 = make(phi_1.clone());
    let spec_2 = make(phi_2.clone());
    let zero = with_driver(spec, Arc::new(|_, _, _, _, _, _, _| 0.0));
    let sq = |x: &[f64]| (xi_1(x) - xi_2(x)).powi(2);

    let solver = TreeSolver::new(spec, *grid, gauss)?;
    let dt = grid.dt();
    let t0 = grid.t0;
    let rates: Vec<f64> = spec.levy.atoms.iter().map(|a| a.rate).collect();
    let mut integral_lhs = 0.0;
    let mut integral_rhs = 0.0;
    let roots = solver.multi_bsde(
        &[&spec_1, &spec_2, &zero],
        &[xi_1, xi_2, &sq],
        u_policy,
        v_policy,
        0,
        x0,
        &mut |node| {
            let (a, b) = (&node.values[0], &node.values[1]);
            let w = node.prob * dt * (beta * (node.time - t0)).exp();
            let dz: f64 = a.z.iter().zip(&b.z).map(|(p, q)| (p - q).powi(2)).sum();
            let dk: f64 = a.k.iter().zip(&b.k).zip(&rates).map(|((p, q), r)| r * (p - q).powi(2)).sum();
            integral_lhs += w * ((a.y - b.y).powi(2) + dz + dk);
            integral_rhs += w * (phi_1(node.time, node.state) - phi_2(node.time, node.state)).powi(2);
        },
    )?;
    let lhs = (roots[0].y - roots[1].y).powi(2) + 0.5 * integral_lhs;
    let rhs = (beta * (grid.horizon - t0)).exp() * roots[2].y + integral_rhs;
    let slack = 10.0 * dt;
    Ok(StabilityReport {
        beta,
        beta_threshold: threshold,
        lhs,
        rhs,
        slack,
        passed: lhs <= rhs * (1.0 + slack),
    })
}

// ---------------------------------------------------------------------------
// Markov identity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovReport {
    pub mode: EngineMode,
    pub n_samples: usize,
    /// Empirical cell frequencies.
    pub cell_mass: Vec<f64>,
    /// `u(t, x_i)` from the pointwise solves.
    pub pointwise: Vec<f64>,
    pub max_discrepancy: f64,
    /// Multilinear interpolation error bound (grid mode; 0 for the tree).
    pub interpolation_bound: f64,
    pub passed: bool,
}

/// Pre-`t` information used to build the partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct History {
    pub n_samples: usize,
    pub steps: usize,
    pub seed: u64,
}

/// Compares `Y_t^{t,ζ}` for `ζ = Σ x_i 1_{A_i}` with `Σ 1_{A_i} u(t, x_i)`.
///
/// The cells `A_i` are quantile bins of the summed Brownian history over a
/// unit window before `t`. The left side solves from each sample's realized
/// initial state; the right side reads the pointwise solves (tree values, or
/// the interpolated grid field).
#[allow(clippy::too_many_arguments)]
pub fn markov_identity_check(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    sgrid: &StateGrid,
    u_policy: &dyn ControlPolicy,
    v_policy: &dyn ControlPolicy,
    values: &[Vec<f64>],
    history: &History,
    engine: &Engine,
) -> Result<MarkovReport> {
    if values.is_empty() || values.len() > 4 {
        return Err(Error::Config("the partition needs between 1 and 4 values".into()));
    }
    let hgrid = TimeGrid::new(0.0, 1.0, history.steps.max(1))?;
    let bundles = sample_paths(&LevyMeasure::empty(), &hgrid, spec.d(), history.n_samples, history.seed)?;
    let score: Vec<f64> = bundles.iter().map(|b| b.brownian.iter().sum()).collect();
    let mut sorted = score.clone();
    sorted.sort_by(f64::total_cmp);
    let m = values.len();
    let cuts: Vec<f64> = (1..m).map(|i| sorted[i * sorted.len() / m]).collect();
    let cell_of = |s: f64| cuts.iter().filter(|c| s >= **c).count();
    let phi = |x: &[f64]| spec.terminal(x);
    let phi_field = crate::grid::FnField(phi);

    let (pointwise, lhs_of, bound): (Vec<f64>, Box<dyn Fn(&[f64]) -> Result<f64> + '_>, f64) = match engine.mode {
        EngineMode::TreeOracle => {
            let solver = TreeSolver::new(spec, *grid, engine.gauss)?;
            let pointwise = values
                .iter()
                .map(|x| Ok(solver.bsde(u_policy, v_policy, &phi, 0, x)?.y))
                .collect::<Result<Vec<_>>>()?;
            let solver = TreeSolver::new(spec, *grid, engine.gauss)?;
            let lhs = move |zeta: &[f64]| Ok(solver.bsde(u_policy, v_policy, &phi, 0, zeta)?.y);
            (pointwise, Box::new(lhs), 0.0)
        }
        EngineMode::QuadratureGrid => {
            let sol = solve_bsde(spec, grid, sgrid, u_policy, v_policy, &phi_field, engine)?;
            let pointwise: Vec<f64> = values.iter().map(|x| sol.y_at(0, x)).collect();
            let bound = interpolation_bound(sgrid, &sol.y[0]);
            let rule = StepRule::new(&spec.levy, spec.d(), engine.gauss, grid.dt())?;
            let n = grid.n_steps;
            let lhs = move |zeta: &[f64]| {
                let (ui, vi) = select_feedback(spec, u_policy, v_policy, 0, grid.t0, zeta)?;
                let v = backward_step(spec, &rule, grid.t0, zeta, spec.u_set.point(ui), spec.v_set.point(vi), engine.tol, |c| {
                    Ok(if n == 1 { spec.terminal(c) } else { sol.y_at(1, c) })
                })?;
                Ok(v.y)
            };
            (pointwise, Box::new(lhs), bound)
        }
    };
    let mut max_discrepancy: f64 = 0.0;
    let mut counts = vec![0usize; m];
    let mut cache: Vec<Option<f64>> = vec![None; m];
    for s in &score {
        let i = cell_of(*s);
        counts[i] += 1;
        // Every sample in a cell shares the same realized initial state.
        let y = match cache[i] {
            Some(y) => y,
            None => {
                let y = lhs_of(&values[i])?;
                cache[i] = Some(y);
                y
            }
        };
        max_discrepancy = max_discrepancy.max((y - pointwise[i]).abs());
    }
    let tol = match engine.mode {
        EngineMode::TreeOracle => 1e-12,
        EngineMode::QuadratureGrid => bound + 1e-12,
    };
    Ok(MarkovReport {
        mode: engine.mode,
        n_samples: score.len(),
        cell_mass: counts.iter().map(|c| *c as f64 / score.len() as f64).collect(),
        pointwise,
        max_discrepancy,
        interpolation_bound: bound,
        passed: max_discrepancy <= tol,
    })
}

/// `Σ_a h_a² / 8 · max |∂²_a y|` from second differences of node values.
pub fn interpolation_bound(sgrid: &StateGrid, values: &[f64]) -> f64 {
    let mut bound = 0.0;
    for a in 0..sgrid.dim() {
        let stride = sgrid.stride(a);
        let axis = &sgrid.axes[a];
        let h = sgrid.max_spacing();
        let mut max_d2: f64 = 0.0;
        for flat in 0..sgrid.len() {
            let i = sgrid.multi_index(flat)[a];
            if i == 0 || i + 1 >= axis.len() {
                continue;
            }
            let (hl, hr) = (axis[i] - axis[i - 1], axis[i + 1] - axis[i]);
            let d2 = 2.0
                * ((values[flat + stride] - values[flat]) / hr - (values[flat] - values[flat - stride]) / hl)
                / (hl + hr);
            max_d2 = max_d2.max(d2.abs());
        }
        bound += h * h / 8.0 * max_d2;
    }
    bound
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Writes `step, node, x_1..x_n, y, z_1..z_d, k_bar`; the terminal step has
/// empty `z` and `k_bar` columns.
pub fn write_solution_csv<W: std::io::Write>(sol: &BsdeSolution, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = sol.sgrid.dim();
    let mut header = vec!["step".to_string(), "node".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.push("y".into());
    header.extend((1..=sol.d).map(|j| format!("z_{j}")));
    header.push("k_bar".into());
    w.write_record(&header)?;
    let mut x = vec![0.0; n];
    for k in 0..=sol.grid.n_steps {
        for node in 0..sol.sgrid.len() {
            sol.sgrid.node_into(node, &mut x);
            let mut row = vec![k.to_string(), node.to_string()];
            row.extend(x.iter().map(|v| format!("{v}")));
            row.push(format!("{}", sol.y[k][node]));
            if k < sol.grid.n_steps {
                row.extend(sol.z[k][node * sol.d..(node + 1) * sol.d].iter().map(|v| format!("{v}")));
                row.push(format!("{}", sol.k_bar[k][node]));
            } else {
                row.extend(std::iter::repeat_n(String::new(), sol.d + 1));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Checks that a problem's forward coefficients give finite steps on the grid.
pub fn probe_forward(spec: &ProblemSpec, grid: &TimeGrid, sgrid: &StateGrid) -> Result<()> {
    for x in sgrid.nodes() {
        for u in &spec.u_set.points {
            for v in &spec.v_set.points {
                StepCoefficients::new(spec, grid.t0, &x, u, v, grid.dt())?;
            }
        }
    }
    Ok(())
}
