//! Lower and upper value functions by backward dynamic programming, and the
//! checks built on them: dynamic programming principle, regularity, and
//! determinism of the Monte Carlo cost estimator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{solve_bsde, BsdeSolution, Engine, EngineMode, ShiftedSteps};
use crate::error::{Error, Result};
use crate::forward::{simulate_from, ConstantPolicy, ContextPolicy, ControlPolicy, ForwardTrajectory};
use crate::grid::{FieldSlice, FnField, GridField, StateGrid};
use crate::levy_paths::{sample_path, segment_swap, PathBundle, TimeGrid};
use crate::oracle::{matrix_game, TreeSolver, Which};
use crate::problem::ProblemSpec;
use crate::step::{backward_step, check_step_size, StepRule};

/// Discrete lower or upper value on `time grid x state grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueField {
    pub which: Which,
    pub mode: EngineMode,
    pub grid: TimeGrid,
    pub sgrid: StateGrid,
    /// `values[k][node]`, `k = 0..=n_steps`.
    pub values: Vec<Vec<f64>>,
    /// Selected controls of the step-local game, `k < n_steps`.
    pub argmax_u: Vec<Vec<usize>>,
    pub argmin_v: Vec<Vec<usize>>,
    /// `max |max_u min_v - min_v max_u|` of the step games over all grid-mode
    /// steps and nodes; `None` for tree-mode fields.
    pub step_gap: Option<f64>,
}

impl ValueField {
    pub fn value_at(&self, step: usize, x: &[f64]) -> f64 {
        self.sgrid.interpolate(&self.values[step], x)
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }
}

fn check_controls(spec: &ProblemSpec) -> Result<()> {
    if spec.u_set.is_empty() || spec.v_set.is_empty() {
        return Err(Error::Config("game solves need non-empty control sets".into()));
    }
    Ok(())
}

/// Solves the value recursion with the problem's terminal function.
pub fn solve_value(
    spec: &ProblemSpec,
    which: Which,
    grid: &TimeGrid,
    sgrid: &StateGrid,
    engine: &Engine,
) -> Result<ValueField> {
    let phi = FnField(|x: &[f64]| spec.terminal(x));
    solve_value_from(spec, which, grid, sgrid, &phi, engine)
}

/// Solves the value recursion on `grid` with datum `terminal` at its end.
pub fn solve_value_from(
    spec: &ProblemSpec,
    which: Which,
    grid: &TimeGrid,
    sgrid: &StateGrid,
    terminal: &dyn FieldSlice,
    engine: &Engine,
) -> Result<ValueField> {
    check_controls(spec)?;
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
    check_step_size(spec, grid.dt())?;
    let nodes = sgrid.nodes();
    let n = grid.n_steps;
    let nu = spec.u_set.len();
    let nv = spec.v_set.len();
    let mut values = vec![Vec::new(); n + 1];
    let mut argmax_u = vec![Vec::new(); n];
    let mut argmin_v = vec![Vec::new(); n];
    values[n] = nodes.par_iter().map(|x| terminal.eval(x)).collect();

    let mut step_gap = None;
    let results: Vec<Vec<(f64, usize, usize)>> = match engine.mode {
        EngineMode::QuadratureGrid => {
            let rule = StepRule::new(&spec.levy, spec.d(), engine.gauss, grid.dt())?;
            let mut out = vec![Vec::new(); n];
            for k in (0..n).rev() {
                let t = grid.time(k);
                let next = &values[k + 1];
                let step: Vec<((f64, usize, usize), f64)> = nodes
                    .par_iter()
                    .map(|x| {
                        let mut payoff = vec![0.0; nu * nv];
                        for ui in 0..nu {
                            for vi in 0..nv {
                                let val = backward_step(spec, &rule, t, x, spec.u_set.point(ui), spec.v_set.point(vi), engine.tol, |c| {
                                    Ok(if k + 1 == n {
                                        terminal.eval(c)
                                    } else {
                                        sgrid.interpolate(next, c)
                                    })
                                })?;
                                payoff[ui * nv + vi] = val.y;
                            }
                        }
                        let lower = matrix_game(&payoff, nu, nv, Which::Lower);
                        let upper = matrix_game(&payoff, nu, nv, Which::Upper);
                        let gap = (upper.0 - lower.0).abs();
                        Ok((if which == Which::Lower { lower } else { upper }, gap))
                    })
                    .collect::<Result<_>>()?;
                let gap = step.iter().map(|s| s.1).fold(0.0, f64::max);
                step_gap = Some(step_gap.map_or(gap, |g: f64| g.max(gap)));
                values[k] = step.iter().map(|s| s.0 .0).collect();
                out[k] = step.into_iter().map(|s| s.0).collect();
            }
            out
        }
        EngineMode::TreeOracle => {
            let solver = TreeSolver::new(spec, *grid, engine.gauss)?;
            let term = |x: &[f64]| terminal.eval(x);
            let mut out = vec![Vec::new(); n];
            for (k, slot) in out.iter_mut().enumerate() {
                let step: Vec<(f64, usize, usize)> = nodes
                    .par_iter()
                    .map(|x| solver.game(which, &term, k, n, x).map(|g| (g.value, g.u, g.v)))
                    .collect::<Result<_>>()?;
                values[k] = step.iter().map(|s| s.0).collect();
                *slot = step;
            }
            out
        }
    };
    for (k, step) in results.into_iter().enumerate() {
        argmax_u[k] = step.iter().map(|s| s.1).collect();
        argmin_v[k] = step.iter().map(|s| s.2).collect();
    }
    if let Some((k, i)) = values
        .iter()
        .enumerate()
        .find_map(|(k, row)| row.iter().position(|v| !v.is_finite()).map(|i| (k, i)))
    {
        return Err(Error::numerical(
            "solve_value",
            format!("non-finite value at step {k}, x={:?}", sgrid.node(i)),
        ));
    }
    Ok(ValueField {
        which,
        mode: engine.mode,
        grid: *grid,
        sgrid: sgrid.clone(),
        values,
        argmax_u,
        argmin_v,
        step_gap,
    })
}

impl ValueField {
    /// Stored control indices at the grid node nearest to `x`, for use as a
    /// feedback pair; the last step's choice is reused past the grid.
    pub fn controls_near(&self, step: usize, x: &[f64]) -> (usize, usize) {
        let k = step.min(self.grid.n_steps - 1);
        let idx: Vec<usize> = self
            .sgrid
            .axes
            .iter()
            .zip(x)
            .map(|(axis, xi)| {
                let j = axis.partition_point(|a| a < xi);
                if j == 0 {
                    0
                } else if j == axis.len() || xi - axis[j - 1] <= axis[j] - xi {
                    j - 1
                } else {
                    j
                }
            })
            .collect();
        let node = self.sgrid.flat_index(&idx);
        (self.argmax_u[k][node], self.argmin_v[k][node])
    }
}

/// Largest gap between stored values and a replay of the stored controls
/// through one backward step (grid-mode fields only).
pub fn replay_discrepancy(spec: &ProblemSpec, field: &ValueField, engine: &Engine) -> Result<f64> {
    if field.mode != EngineMode::QuadratureGrid {
        return Err(Error::Config("replay applies to grid-mode value fields".into()));
    }
    let grid = field.grid;
    let rule = StepRule::new(&spec.levy, spec.d(), engine.gauss, grid.dt())?;
    let n = grid.n_steps;
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let t = grid.time(k);
        for i in 0..field.sgrid.len() {
            let x = field.sgrid.node(i);
            let u = spec.u_set.point(field.argmax_u[k][i]);
            let v = spec.v_set.point(field.argmin_v[k][i]);
            let val = backward_step(spec, &rule, t, &x, u, v, engine.tol, |c| {
                Ok(if k + 1 == n {
                    spec.terminal(c)
                } else {
                    field.value_at(k + 1, c)
                })
            })?;
            worst = worst.max((val.y - field.values[k][i]).abs());
        }
    }
    Ok(worst)
}

/// Nodes whose every coordinate lies in the central `fraction` of the box.
pub fn inner_window(sgrid: &StateGrid, fraction: f64) -> Vec<usize> {
    let lo = sgrid.lower();
    let hi = sgrid.upper();
    (0..sgrid.len())
        .filter(|&i| {
            sgrid.node(i).iter().enumerate().all(|(a, x)| {
                let c = 0.5 * (lo[a] + hi[a]);
                let r = 0.5 * (hi[a] - lo[a]) * fraction;
                (x - c).abs() <= r * (1.0 + 1e-12)
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dynamic programming principle
// ---------------------------------------------------------------------------

/// Fraction of the box on which grid-mode DPP discrepancies are measured.
pub const DPP_WINDOW: f64 = 0.5;
/// Discrepancies below this are treated as zero by the ladder.
pub const LADDER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppReport {
    pub which: Which,
    pub mode: EngineMode,
    pub n_steps: usize,
    pub split: usize,
    pub nodes: usize,
    pub dx: f64,
    /// Sup-norm gap at `t0` between the direct and the composed solve.
    pub discrepancy: f64,
}

/// Direct value at `t0` versus the value recomposed at step `split`.
///
/// Tree mode evaluates both at every node of `sgrid` with separate solvers
/// on `[t0, t_split]` and `[t_split, T]`. Grid mode solves the head block on
/// `sgrid` shifted by half a cell, so the composition is not a replay of the
/// direct recursion; the gap is then measured on the inner window.
pub fn dpp_check(
    spec: &ProblemSpec,
    which: Which,
    grid: &TimeGrid,
    sgrid: &StateGrid,
    split: usize,
    engine: &Engine,
) -> Result<DppReport> {
    let n = grid.n_steps;
    if split > n {
        return Err(Error::Domain(format!("split step {split} beyond {n} steps")));
    }
    let report = |discrepancy: f64| DppReport {
        which,
        mode: engine.mode,
        n_steps: n,
        split,
        nodes: sgrid.len(),
        dx: sgrid.max_spacing(),
        discrepancy,
    };
    if split == 0 || split == n {
        return Ok(report(0.0));
    }
    let phi = |x: &[f64]| spec.terminal(x);
    let head_grid = grid.slice(0, split)?;
    let tail_grid = grid.slice(split, n)?;
    let discrepancy = match engine.mode {
        EngineMode::TreeOracle => {
            let direct = TreeSolver::new(spec, *grid, engine.gauss)?;
            let head = TreeSolver::new(spec, head_grid, engine.gauss)?;
            let tail = TreeSolver::new(spec, tail_grid, engine.gauss)?;
            let gaps: Vec<f64> = sgrid
                .nodes()
                .par_iter()
                .map(|x| {
                    let whole = direct.game(which, &phi, 0, n, x)?.value;
                    let cont = |c: &[f64]| tail.game(which, &phi, 0, tail_grid.n_steps, c).map(|g| g.value);
                    let failure = std::sync::Mutex::new(None);
                    let cont_value = |c: &[f64]| match cont(c) {
                        Ok(v) => v,
                        Err(e) => {
                            *failure.lock().unwrap() = Some(e);
                            f64::NAN
                        }
                    };
                    let composed = head.game(which, &cont_value, 0, head_grid.n_steps, x);
                    if let Some(e) = failure.into_inner().unwrap() {
                        return Err(e);
                    }
                    Ok((whole - composed?.value).abs())
                })
                .collect::<Result<_>>()?;
            gaps.into_iter().fold(0.0, f64::max)
        }
        EngineMode::QuadratureGrid => {
            let direct = solve_value(spec, which, grid, sgrid, engine)?;
            let tail = solve_value(spec, which, &tail_grid, sgrid, engine)?;
            let staggered = sgrid.shifted(0.5);
            let datum = GridField {
                grid: sgrid,
                values: &tail.values[0],
            };
            let head = solve_value_from(spec, which, &head_grid, &staggered, &datum, engine)?;
            inner_window(&staggered, DPP_WINDOW)
                .into_iter()
                .map(|i| (head.values[0][i] - direct.value_at(0, &staggered.node(i))).abs())
                .fold(0.0, f64::max)
        }
    };
    Ok(report(discrepancy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppLadder {
    pub rungs: Vec<DppReport>,
    /// Each rung below the previous one, or both under [`LADDER_FLOOR`].
    pub monotone: bool,
}

/// Grid-mode DPP discrepancy while `Δx` and `δ` are halved together.
pub fn dpp_ladder(
    spec: &ProblemSpec,
    which: Which,
    grid: &TimeGrid,
    sgrid: &StateGrid,
    split: usize,
    engine: &Engine,
    rungs: usize,
) -> Result<DppLadder> {
    if rungs == 0 {
        return Err(Error::Config("a ladder needs at least one rung".into()));
    }
    let mut out = Vec::with_capacity(rungs);
    let mut g = *grid;
    let mut s = sgrid.clone();
    let mut k = split;
    for r in 0..rungs {
        if r > 0 {
            g = TimeGrid::new(g.t0, g.horizon, 2 * g.n_steps)?;
            s = s.refined();
            k *= 2;
        }
        out.push(dpp_check(spec, which, &g, &s, k, engine)?);
    }
    let monotone = decreasing(out.iter().map(|r| r.discrepancy));
    Ok(DppLadder { rungs: out, monotone })
}

/// Strictly decreasing sequence, where values under the floor count as equal.
pub fn decreasing(values: impl IntoIterator<Item = f64>) -> bool {
    let v: Vec<f64> = values.into_iter().collect();
    v.windows(2)
        .all(|w| w[1] < w[0] || (w[0] <= LADDER_FLOOR && w[1] <= LADDER_FLOOR))
}

// ---------------------------------------------------------------------------
// Regularity
// ---------------------------------------------------------------------------

/// Fraction of the box used by the regularity measurements.
pub const REGULARITY_WINDOW: f64 = 0.5;
const FLAT_LEVEL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    /// `max |W(t,x_i) - W(t,x_j)| / |x_i - x_j|` over adjacent window nodes.
    pub spatial_ratio: f64,
    /// Fitted exponent of `max |W(t,x) - W(t',x)| / (1 + |x|)` against
    /// `|t - t'|`; `None` when the field does not move in time.
    pub holder_alpha: Option<f64>,
    pub holder_constant: Option<f64>,
    /// `max |W| / (1 + |x|)`.
    pub growth_ratio: f64,
    pub lags: Vec<(f64, f64)>,
}

pub fn regularity_check(field: &ValueField) -> Result<RegularityReport> {
    let n = field.grid.n_steps;
    let sg = &field.sgrid;
    if n < 8 || sg.counts().iter().any(|c| *c < 33) {
        return Err(Error::Config(format!(
            "regularity needs >= 8 steps and >= 33 nodes per axis (got {n} steps, {:?} nodes)",
            sg.counts()
        )));
    }
    let window = inner_window(sg, REGULARITY_WINDOW);
    let in_window = {
        let mut mask = vec![false; sg.len()];
        for &i in &window {
            mask[i] = true;
        }
        mask
    };
    let norm = |i: usize| sg.node(i).iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut spatial: f64 = 0.0;
    for row in &field.values {
        for &i in &window {
            let idx = sg.multi_index(i);
            for a in 0..sg.dim() {
                if idx[a] + 1 >= sg.axes[a].len() {
                    continue;
                }
                let j = i + sg.stride(a);
                if !in_window[j] {
                    continue;
                }
                let h = sg.axes[a][idx[a] + 1] - sg.axes[a][idx[a]];
                spatial = spatial.max((row[j] - row[i]).abs() / h);
            }
        }
    }

    let dt = field.grid.dt();
    let mut lags = Vec::new();
    for m in 1..=n / 2 {
        let mut worst: f64 = 0.0;
        for k in 0..=n - m {
            for &i in &window {
                let diff = (field.values[k][i] - field.values[k + m][i]).abs();
                worst = worst.max(diff / (1.0 + norm(i)));
            }
        }
        lags.push((m as f64 * dt, worst));
    }
    let fit: Vec<(f64, f64)> = lags
        .iter()
        .filter(|(_, d)| *d > FLAT_LEVEL)
        .map(|(h, d)| (h.ln(), d.ln()))
        .collect();
    let (holder_alpha, holder_constant) = if fit.len() >= 2 {
        let (slope, intercept) = least_squares(&fit);
        (Some(slope), Some(intercept.exp()))
    } else {
        (None, None)
    };

    let mut growth: f64 = 0.0;
    for row in &field.values {
        for (i, v) in row.iter().enumerate() {
            growth = growth.max(v.abs() / (1.0 + norm(i)));
        }
    }
    Ok(RegularityReport {
        spatial_ratio: spatial,
        holder_alpha,
        holder_constant,
        growth_ratio: growth,
        lags,
    })
}

fn least_squares(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

// ---------------------------------------------------------------------------
// Determinism of the cost estimator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterminismSetup {
    /// Start time; must be a node of the post-`t` grid's extension.
    pub t: f64,
    pub x: Vec<f64>,
    /// Segment length of the swap; a multiple of the step.
    pub ell: f64,
    /// Steps on `[t, T]`.
    pub n_steps: usize,
    /// Paths per history.
    pub n_paths: usize,
    pub seed: u64,
    /// Grid for the BSDE fields entering the path-wise driver integral.
    pub sgrid: StateGrid,
    pub gauss: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterminismReport {
    /// `max |J - J∘τ|` over paths for the supplied feedback policies.
    pub swap_difference: f64,
    pub swap_invariant: bool,
    pub mean_1: f64,
    pub se_1: f64,
    pub mean_2: f64,
    pub se_2: f64,
    /// `|mean_1 - mean_2| / sqrt(se_1² + se_2²)`.
    pub z_score: f64,
    pub histories_agree: bool,
    /// `max |J - J∘τ|` for a policy that reads the pre-`t` noise.
    pub control_difference: f64,
    pub control_detected: bool,
    /// `max |J(u_first) - J(u_last)|` under constant policies; when 0 the
    /// first player cannot move the cost and the negative control is vacuous.
    pub control_influence: f64,
    /// Backward-solver value `Y_t(x)` for the same policies.
    pub bsde_value: f64,
}

impl DeterminismReport {
    pub fn passed(&self) -> bool {
        self.swap_invariant && self.histories_agree && (self.control_detected || self.control_influence == 0.0)
    }
}

struct CostModel<'a> {
    spec: &'a ProblemSpec,
    fields: BsdeSolution,
    post: TimeGrid,
    start: usize,
}

impl CostModel<'_> {
    /// `Φ(X_T) + Σ δ f(t_j, X_j, y, z, k̄, u_j, v_j)` along a trajectory.
    fn cost(&self, traj: &ForwardTrajectory) -> f64 {
        let spec = self.spec;
        let dt = self.post.dt();
        let mut total = spec.terminal(traj.terminal());
        for j in 0..traj.controls_u.len() {
            let x = traj.state(j);
            let y = self.fields.y_at(j, x);
            let z = self.fields.z_at(j, x);
            let k = self.fields.k_bar_at(j, x);
            let u = spec.u_set.point(traj.controls_u[j]);
            let v = spec.v_set.point(traj.controls_v[j]);
            total += dt * spec.coefficients.driver(self.post.time(j), x, y, &z, k, u, v);
        }
        total
    }

    fn run(&self, bundle: &PathBundle, x: &[f64], u: &dyn ControlPolicy, v: &dyn ControlPolicy) -> Result<f64> {
        Ok(self.cost(&simulate_from(self.spec, bundle, self.start, x, u, v)?))
    }
}

/// Swap invariance of the path-wise cost, agreement of estimates from two
/// disjoint sets of histories, and a negative control reading pre-`t` noise.
///
/// Policies see the step index of the full noise grid, which starts `2ℓ`
/// before `t`.
pub fn determinism_check(
    spec: &ProblemSpec,
    setup: &DeterminismSetup,
    u_policy: &dyn ControlPolicy,
    v_policy: &dyn ControlPolicy,
) -> Result<DeterminismReport> {
    if setup.n_paths < 2 {
        return Err(Error::Config("determinism check needs at least 2 paths".into()));
    }
    let post = TimeGrid::new(setup.t, spec.horizon, setup.n_steps)?;
    let dt = post.dt();
    let m_real = setup.ell / dt;
    let m = m_real.round();
    if !(setup.ell > 0.0) || m < 1.0 || (m_real - m).abs() > 1e-9 {
        return Err(Error::Alignment(format!(
            "ell={} is not a positive multiple of the step {dt}",
            setup.ell
        )));
    }
    let m = m as usize;
    let start = 2 * m;
    let full = TimeGrid::new(setup.t - 2.0 * m as f64 * dt, spec.horizon, start + setup.n_steps)?;
    let u_shift = ShiftedSteps {
        inner: u_policy,
        offset: start,
    };
    let v_shift = ShiftedSteps {
        inner: v_policy,
        offset: start,
    };
    let phi = FnField(|x: &[f64]| spec.terminal(x));
    let fields = solve_bsde(spec, &post, &setup.sgrid, &u_shift, &v_shift, &phi, &Engine::grid(setup.gauss))?;
    let bsde_value = fields.y_at(0, &setup.x);
    let model = CostModel {
        spec,
        fields,
        post,
        start,
    };

    let nu = spec.u_set.len();
    let peeking = ContextPolicy::new(move |ctx| {
        let Some(bundle) = ctx.bundle else { return 0 };
        let sum = |from: usize, to: usize| (from..to).map(|k| bundle.increment(k)[0]).sum::<f64>();
        if sum(start - 2 * m, start - m) > sum(start - m, start) {
            0
        } else {
            nu - 1
        }
    });

    let n = setup.n_paths as u64;
    let (first_u, last_u) = (ConstantPolicy(0), ConstantPolicy(nu - 1));
    let per_path: Vec<(f64, f64, f64, f64)> = (0..2 * n)
        .into_par_iter()
        .map(|p| {
            let bundle = sample_path(&spec.levy, &full, spec.d(), setup.seed, p)?;
            let j = model.run(&bundle, &setup.x, u_policy, v_policy)?;
            if p >= n {
                return Ok((j, 0.0, 0.0, 0.0));
            }
            let swapped = segment_swap(&bundle, setup.t, m as f64 * dt)?;
            let j_swapped = model.run(&swapped, &setup.x, u_policy, v_policy)?;
            let c = model.run(&bundle, &setup.x, &peeking, v_policy)?;
            let c_swapped = model.run(&swapped, &setup.x, &peeking, v_policy)?;
            let influence = (model.run(&bundle, &setup.x, &first_u, v_policy)?
                - model.run(&bundle, &setup.x, &last_u, v_policy)?)
                .abs();
            Ok((j, (j - j_swapped).abs(), (c - c_swapped).abs(), influence))
        })
        .collect::<Result<_>>()?;
    let first: Vec<f64> = per_path[..setup.n_paths].iter().map(|r| r.0).collect();
    let second: Vec<f64> = per_path[setup.n_paths..].iter().map(|r| r.0).collect();
    let swap_difference = per_path.iter().map(|r| r.1).fold(0.0, f64::max);
    let control_difference = per_path.iter().map(|r| r.2).fold(0.0, f64::max);
    let control_influence = per_path.iter().map(|r| r.3).fold(0.0, f64::max);
    let (mean_1, se_1) = crate::stats::mean_se(&first);
    let (mean_2, se_2) = crate::stats::mean_se(&second);
    let combined = (se_1 * se_1 + se_2 * se_2).sqrt();
    let gap = (mean_1 - mean_2).abs();
    let z_score = if combined > 0.0 {
        gap / combined
    } else if gap == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(DeterminismReport {
        swap_difference,
        swap_invariant: swap_difference == 0.0,
        mean_1,
        se_1,
        mean_2,
        se_2,
        z_score,
        histories_agree: z_score <= 3.0,
        control_difference,
        control_detected: control_difference > 0.0,
        control_influence,
        bsde_value,
    })
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Writes `step, time, node, x_1..x_n, value, u_idx, v_idx`; the terminal
/// step has empty control columns.
pub fn write_value_csv<W: std::io::Write>(field: &ValueField, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = field.sgrid.dim();
    let mut header = vec!["step".to_string(), "time".into(), "node".into()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend(["value".into(), "u_idx".into(), "v_idx".into()]);
    w.write_record(&header)?;
    for (k, row) in field.values.iter().enumerate() {
        for (i, value) in row.iter().enumerate() {
            let mut rec = vec![k.to_string(), field.grid.time(k).to_string(), i.to_string()];
            rec.extend(field.sgrid.node(i).iter().map(|x| x.to_string()));
            rec.push(value.to_string());
            if k < field.grid.n_steps {
                rec.push(field.argmax_u[k][i].to_string());
                rec.push(field.argmin_v[k][i].to_string());
            } else {
                rec.extend([String::new(), String::new()]);
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{scenario, ControlSet, CustomCoefficients, Dims};
    use crate::levy_paths::LevyMeasure;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn custom(co: CustomCoefficients, u: &[f64], v: &[f64]) -> ProblemSpec {
        ProblemSpec::from_coefficients(
            Arc::new(co),
            Dims {
                state: 1,
                brownian: 1,
                mark: 1,
            },
            1.0,
            1.0,
            ControlSet::scalar("U", u).unwrap(),
            ControlSet::scalar("V", v).unwrap(),
            LevyMeasure::empty(),
        )
        .unwrap()
    }

    #[test]
    fn zero_dynamics_keep_phi() {
        let spec = scenario("zero_dynamics").unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let sgrid = StateGrid::cube(1, 2.0, 9).unwrap();
        for which in [Which::Lower, Which::Upper] {
            let f = solve_value(&spec, which, &grid, &sgrid, &Engine::default()).unwrap();
            for row in &f.values {
                for (v, x) in row.iter().zip(sgrid.nodes()) {
                    assert_abs_diff_eq!(*v, x[0], epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn separable_one_step_game_has_linear_value() {
        let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
        for sign in [-1.0, 1.0] {
            let co = CustomCoefficients::default()
                .with_drift(move |_, _, u, v, out| out[0] = u[0] + sign * v[0])
                .with_diffusion(|_, _, _, _, out| out[0] = 0.3)
                .with_terminal(|x| x[0]);
            let spec = custom(co, &grid, &grid);
            let tg = TimeGrid::new(0.5, 1.0, 1).unwrap();
            let sg = StateGrid::cube(1, 1.0, 3).unwrap();
            let lower = solve_value(&spec, Which::Lower, &tg, &sg, &Engine::tree(3)).unwrap();
            let upper = solve_value(&spec, Which::Upper, &tg, &sg, &Engine::tree(3)).unwrap();
            for (i, x) in sg.nodes().iter().enumerate() {
                assert_abs_diff_eq!(lower.values[0][i], x[0], epsilon = 1e-14);
                assert_eq!(lower.values[0][i], upper.values[0][i]);
            }
        }
    }

    #[test]
    fn lower_never_exceeds_upper() {
        let spec = scenario("bilinear_gap").unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let sgrid = StateGrid::cube(1, 2.0, 17).unwrap();
        let lo = solve_value(&spec, Which::Lower, &grid, &sgrid, &Engine::default()).unwrap();
        let up = solve_value(&spec, Which::Upper, &grid, &sgrid, &Engine::default()).unwrap();
        for (a, b) in lo.values.iter().flatten().zip(up.values.iter().flatten()) {
            assert!(*a <= *b + 1e-12);
        }
        assert!(replay_discrepancy(&spec, &lo, &Engine::default()).unwrap() <= 1e-12);
    }

    #[test]
    fn degenerate_split_is_zero() {
        let spec = scenario("jump_heavy").unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let sgrid = StateGrid::cube(1, 2.0, 9).unwrap();
        let r = dpp_check(&spec, Which::Lower, &grid, &sgrid, 16, &Engine::default()).unwrap();
        assert_eq!(r.discrepancy, 0.0);
    }

    #[test]
    fn constant_driver_fits_linear_time_dependence() {
        let c = 0.4;
        let co = CustomCoefficients::default()
            .with_driver(move |_, _, _, _, _, _, _| c)
            .with_terminal(|x| x[0]);
        let spec = custom(co, &[0.0], &[0.0]);
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let sgrid = StateGrid::cube(1, 2.0, 33).unwrap();
        let f = solve_value(&spec, Which::Lower, &grid, &sgrid, &Engine::default()).unwrap();
        let r = regularity_check(&f).unwrap();
        assert_abs_diff_eq!(r.holder_alpha.unwrap(), 1.0, epsilon = 1e-6);
        assert!(r.spatial_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn regularity_needs_resolution() {
        let spec = scenario("zero_dynamics").unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let sgrid = StateGrid::cube(1, 2.0, 33).unwrap();
        let f = solve_value(&spec, Which::Lower, &grid, &sgrid, &Engine::default()).unwrap();
        assert!(matches!(regularity_check(&f), Err(Error::Config(_))));
    }

    #[test]
    fn flat_field_has_no_holder_fit() {
        let spec = scenario("zero_dynamics").unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let sgrid = StateGrid::cube(1, 2.0, 33).unwrap();
        let f = solve_value(&spec, Which::Lower, &grid, &sgrid, &Engine::default()).unwrap();
        let r = regularity_check(&f).unwrap();
        assert!(r.holder_alpha.is_none());
        assert_abs_diff_eq!(r.spatial_ratio, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn swap_leaves_feedback_cost_unchanged() {
        let spec = scenario("driver_coupled").unwrap();
        let setup = DeterminismSetup {
            t: 0.5,
            x: vec![0.2],
            ell: 0.1,
            n_steps: 5,
            n_paths: 200,
            seed: 3,
            sgrid: StateGrid::cube(1, 3.0, 25).unwrap(),
            gauss: 5,
        };
        let r = determinism_check(&spec, &setup, &ConstantPolicy(2), &ConstantPolicy(0)).unwrap();
        assert_eq!(r.swap_difference, 0.0);
        assert!(r.control_detected);
    }

    #[test]
    fn value_csv_layout() {
        let spec = scenario("zero_dynamics").unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let sgrid = StateGrid::cube(1, 1.0, 3).unwrap();
        let f = solve_value(&spec, Which::Upper, &grid, &sgrid, &Engine::default()).unwrap();
        let mut buf = Vec::new();
        write_value_csv(&f, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,time,node,x_1,value,u_idx,v_idx");
        assert_eq!(lines.len(), 1 + 6 * 3);
        assert!(lines.last().unwrap().ends_with(",,"));
    }
}
