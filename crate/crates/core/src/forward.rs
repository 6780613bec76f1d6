//! Euler simulation of the controlled jump diffusion along sampled noise,
//! control policies, and the moment-estimate harness.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levy_paths::{sample_path, PathBundle, TimeGrid};
use crate::problem::ProblemSpec;
use crate::step::StepCoefficients;

/// Everything a policy may look at when choosing a control.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub step: usize,
    pub time: f64,
    pub state: &'a [f64],
    /// The opponent's same-step control index, for reacting strategies.
    pub opponent: Option<usize>,
    /// The driving noise, for policies that read it (diagnostics only).
    pub bundle: Option<&'a PathBundle>,
}

/// Maps the information available at a step to a control index.
pub trait ControlPolicy: Send + Sync {
    fn select(&self, ctx: &PolicyContext<'_>) -> usize;

    /// Whether the policy needs the opponent's same-step action.
    fn reacts(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstantPolicy(pub usize);

impl ControlPolicy for ConstantPolicy {
    fn select(&self, _ctx: &PolicyContext<'_>) -> usize {
        self.0
    }
}

/// Markov feedback `(step, t, x) -> index`.
pub struct FeedbackPolicy<F>(pub F);

impl<F: Fn(usize, f64, &[f64]) -> usize + Send + Sync> FeedbackPolicy<F> {
    pub fn new(f: F) -> Self {
        Self(f)
    }
}

impl<F: Fn(usize, f64, &[f64]) -> usize + Send + Sync> ControlPolicy for FeedbackPolicy<F> {
    fn select(&self, ctx: &PolicyContext<'_>) -> usize {
        (self.0)(ctx.step, ctx.time, ctx.state)
    }
}

/// Step-wise reaction to the opponent's current control.
pub struct ReactionPolicy<F>(pub F);

impl<F: Fn(usize, f64, &[f64], usize) -> usize + Send + Sync> ReactionPolicy<F> {
    pub fn new(f: F) -> Self {
        Self(f)
    }
}

impl<F: Fn(usize, f64, &[f64], usize) -> usize + Send + Sync> ControlPolicy for ReactionPolicy<F> {
    fn select(&self, ctx: &PolicyContext<'_>) -> usize {
        (self.0)(ctx.step, ctx.time, ctx.state, ctx.opponent.unwrap_or(0))
    }

    fn reacts(&self) -> bool {
        true
    }
}

/// Arbitrary closure over the whole context, including the noise.
pub struct ContextPolicy<F>(pub F);

impl<F: Fn(&PolicyContext<'_>) -> usize + Send + Sync> ContextPolicy<F> {
    pub fn new(f: F) -> Self {
        Self(f)
    }
}

impl<F: Fn(&PolicyContext<'_>) -> usize + Send + Sync> ControlPolicy for ContextPolicy<F> {
    fn select(&self, ctx: &PolicyContext<'_>) -> usize {
        (self.0)(ctx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrajectory {
    pub grid: TimeGrid,
    /// First step of `grid` that was simulated.
    pub start_step: usize,
    pub n: usize,
    /// Row-major `[n_steps - start_step + 1][n]`.
    pub states: Vec<f64>,
    pub controls_u: Vec<usize>,
    pub controls_v: Vec<usize>,
}

impl ForwardTrajectory {
    /// State after `j` simulated steps.
    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.n..(j + 1) * self.n]
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

fn choose(
    spec: &ProblemSpec,
    u_policy: &dyn ControlPolicy,
    v_policy: &dyn ControlPolicy,
    step: usize,
    time: f64,
    state: &[f64],
    bundle: Option<&PathBundle>,
) -> Result<(usize, usize)> {
    let ctx = PolicyContext {
        step,
        time,
        state,
        opponent: None,
        bundle,
    };
    let (u, v) = match (u_policy.reacts(), v_policy.reacts()) {
        (true, true) => {
            return Err(Error::Config("at most one player may use a reacting strategy".into()))
        }
        (false, true) => {
            let u = u_policy.select(&ctx);
            let v = v_policy.select(&PolicyContext {
                opponent: Some(u),
                ..ctx
            });
            (u, v)
        }
        (true, false) => {
            let v = v_policy.select(&ctx);
            let u = u_policy.select(&PolicyContext {
                opponent: Some(v),
                ..ctx
            });
            (u, v)
        }
        (false, false) => (u_policy.select(&ctx), v_policy.select(&ctx)),
    };
    if u >= spec.u_set.len() || v >= spec.v_set.len() {
        return Err(Error::Config(format!(
            "policy returned control index out of range (u={u}, v={v})"
        )));
    }
    Ok((u, v))
}

/// Simulates from grid step `start_step` of the bundle with `X = x0` there.
pub fn simulate_from(
    spec: &ProblemSpec,
    bundle: &PathBundle,
    start_step: usize,
    x0: &[f64],
    u_policy: &dyn ControlPolicy,
    v_policy: &dyn ControlPolicy,
) -> Result<ForwardTrajectory> {
    let n = spec.n();
    if x0.len() != n {
        return Err(Error::Dimension(format!("x0 has length {}, state dimension is {n}", x0.len())));
    }
    if bundle.dim != spec.d() {
        return Err(Error::Dimension(format!(
            "bundle Brownian dimension {} differs from problem dimension {}",
            bundle.dim,
            spec.d()
        )));
    }
    let grid = bundle.grid;
    if start_step >= grid.n_steps {
        return Err(Error::Domain(format!("start step {start_step} beyond the grid")));
    }
    if grid.horizon > spec.horizon * (1.0 + 1e-12) {
        return Err(Error::Domain("bundle grid extends beyond the problem horizon".into()));
    }
    let dt = grid.dt();
    let steps = grid.n_steps - start_step;
    let mut states = Vec::with_capacity((steps + 1) * n);
    states.extend_from_slice(x0);
    let mut controls_u = Vec::with_capacity(steps);
    let mut controls_v = Vec::with_capacity(steps);
    let mut next = vec![0.0; n];
    for k in start_step..grid.n_steps {
        let t = grid.time(k);
        let x = states[states.len() - n..].to_vec();
        let (ui, vi) = choose(spec, u_policy, v_policy, k, t, &x, Some(bundle))?;
        let coeffs = StepCoefficients::new(spec, t, &x, spec.u_set.point(ui), spec.v_set.point(vi), dt)
            .map_err(|e| match e {
                Error::Numerical { message, .. } => Error::numerical("simulate", format!("step {k}: {message}")),
                other => other,
            })?;
        coeffs.apply(
            bundle.increment(k),
            bundle.jumps_in(k).iter().map(|j| j.atom),
            &mut next,
        );
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("simulate", format!("non-finite state at step {k}, x={x:?}")));
        }
        states.extend_from_slice(&next);
        controls_u.push(ui);
        controls_v.push(vi);
    }
    Ok(ForwardTrajectory {
        grid,
        start_step,
        n,
        states,
        controls_u,
        controls_v,
    })
}

/// Simulates the whole bundle grid.
pub fn simulate(
    spec: &ProblemSpec,
    bundle: &PathBundle,
    x0: &[f64],
    u_policy: &dyn ControlPolicy,
    v_policy: &dyn ControlPolicy,
) -> Result<ForwardTrajectory> {
    simulate_from(spec, bundle, 0, x0, u_policy, v_policy)
}

/// Writes `step, time, x_1..x_n, u_1..u_p, v_1..v_q`; the terminal row has
/// empty control columns.
pub fn write_trajectory_csv<W: Write>(spec: &ProblemSpec, traj: &ForwardTrajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let p = spec.u_set.dim();
    let q = spec.v_set.dim();
    let mut header = vec!["step".to_string(), "time".to_string()];
    header.extend((1..=traj.n).map(|i| format!("x_{i}")));
    if p == 1 {
        header.push("u".into());
    } else {
        header.extend((1..=p).map(|i| format!("u_{i}")));
    }
    if q == 1 {
        header.push("v".into());
    } else {
        header.extend((1..=q).map(|i| format!("v_{i}")));
    }
    w.write_record(&header)?;
    for j in 0..traj.len() {
        let k = traj.start_step + j;
        let mut row = vec![k.to_string(), format!("{}", traj.grid.time(k))];
        row.extend(traj.state(j).iter().map(|v| format!("{v}")));
        if j < traj.controls_u.len() {
            row.extend(spec.u_set.point(traj.controls_u[j]).iter().map(|v| format!("{v}")));
            row.extend(spec.v_set.point(traj.controls_v[j]).iter().map(|v| format!("{v}")));
        } else {
            row.extend(std::iter::repeat_n(String::new(), p + q));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub n_steps: usize,
    pub n_paths: usize,
    /// `E[sup |X^{x0} - X^{x0'}|²] / |x0 - x0'|²` (0 when `x0 = x0'`).
    pub difference_ratio: f64,
    /// `E[sup |X|²] / (1 + |x0|²)`.
    pub growth_ratio: f64,
    /// `E[|X_{t+δ} - x0|²] / (δ (1 + |x0|²))` over the first step.
    pub local_ratio: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Moment estimates under constant policies drawn at random per path.
pub fn moment_check(
    spec: &ProblemSpec,
    n_steps: usize,
    x0: &[f64],
    x0_prime: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<MomentReport> {
    if n_paths == 0 {
        return Err(Error::Config("moment_check needs n_paths >= 1".into()));
    }
    let grid = TimeGrid::new(0.0, spec.horizon, n_steps)?;
    let dt = grid.dt();
    let dx2 = sq_dist(x0, x0_prime);
    let x0_sq: f64 = x0.iter().map(|v| v * v).sum();
    let nu = spec.u_set.len();
    let nv = spec.v_set.len();
    let per_path: Vec<Result<(f64, f64, f64)>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let bundle = sample_path(&spec.levy, &grid, spec.d(), seed, p)?;
            let mut rng = crate::levy_paths::stream(seed, p, u64::MAX, 7);
            let u = ConstantPolicy(rng.random_range(0..nu));
            let v = ConstantPolicy(rng.random_range(0..nv));
            let a = simulate(spec, &bundle, x0, &u, &v)?;
            let diff = if dx2 > 0.0 {
                let b = simulate(spec, &bundle, x0_prime, &u, &v)?;
                (0..a.len()).map(|j| sq_dist(a.state(j), b.state(j))).fold(0.0, f64::max) / dx2
            } else {
                0.0
            };
            let growth = (0..a.len())
                .map(|j| a.state(j).iter().map(|v| v * v).sum::<f64>())
                .fold(0.0, f64::max);
            let local = sq_dist(a.state(1), x0);
            Ok((diff, growth, local))
        })
        .collect();
    let mut sums = (0.0, 0.0, 0.0);
    for r in per_path {
        let (a, b, c) = r?;
        sums.0 += a;
        sums.1 += b;
        sums.2 += c;
    }
    let n = n_paths as f64;
    Ok(MomentReport {
        n_steps,
        n_paths,
        difference_ratio: sums.0 / n,
        growth_ratio: sums.1 / n / (1.0 + x0_sq),
        local_ratio: sums.2 / n / (dt * (1.0 + x0_sq)),
    })
}

/// Moment reports over a halving ladder and whether every ratio stayed bounded
/// (no ratio grew by 1.5x or more at every rung).
pub fn moment_ladder(
    spec: &ProblemSpec,
    base_steps: usize,
    rungs: usize,
    x0: &[f64],
    x0_prime: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<(Vec<MomentReport>, bool)> {
    let reports: Vec<MomentReport> = (0..rungs)
        .map(|r| moment_check(spec, base_steps << r, x0, x0_prime, n_paths, seed))
        .collect::<Result<_>>()?;
    let grows = |f: fn(&MomentReport) -> f64| {
        reports.len() > 1
            && reports
                .windows(2)
                .all(|w| f(&w[1]) >= 1.5 * f(&w[0]) && f(&w[1]) > 1e-12)
    };
    let bounded = !(grows(|r| r.difference_ratio) || grows(|r| r.growth_ratio) || grows(|r| r.local_ratio));
    Ok((reports, bounded))
}
