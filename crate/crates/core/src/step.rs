//! The one-step Euler update and the one-step backward operator shared by
//! the simulator, the grid solvers and the exact tree.
//!
//! Conditional expectations over one step run over Gauss–Hermite nodes for
//! the Brownian increment tensored with "no jump" (probability `1 - Λδ`) or
//! "one jump from atom i" (probability `λ_i δ`).

use crate::error::{Error, Result};
use crate::levy_paths::LevyMeasure;
use crate::problem::ProblemSpec;
use crate::quadrature::{GaussHermite, TensorRule};

/// Largest admissible `Λδ` for the 0-or-1 jump expansion.
pub const MAX_JUMP_MASS: f64 = 0.2;

/// Fixed-point budget for the implicit `y` update.
pub const MAX_FIXED_POINT_ITERATIONS: usize = 50;

/// Coefficients frozen at the left endpoint of one step.
#[derive(Debug, Clone)]
pub struct StepCoefficients {
    /// `x + b δ - δ Σ λ_i γ(e_i)`.
    pub base: Vec<f64>,
    /// Row-major `n x d` diffusion matrix.
    pub sigma: Vec<f64>,
    /// `γ(e_i)` per atom.
    pub gammas: Vec<Vec<f64>>,
    pub n: usize,
    pub d: usize,
}

impl StepCoefficients {
    pub fn new(spec: &ProblemSpec, t: f64, x: &[f64], u: &[f64], v: &[f64], dt: f64) -> Result<Self> {
        let n = spec.n();
        let d = spec.d();
        let co = spec.coefficients.as_ref();
        let mut b = vec![0.0; n];
        co.drift(t, x, u, v, &mut b);
        let mut sigma = vec![0.0; n * d];
        co.diffusion(t, x, u, v, &mut sigma);
        let mut comp = vec![0.0; n];
        let mut gammas = Vec::with_capacity(spec.levy.len());
        for atom in &spec.levy.atoms {
            let mut g = vec![0.0; n];
            co.jump(t, x, u, v, &atom.mark, &mut g);
            for (c, gi) in comp.iter_mut().zip(&g) {
                *c += atom.rate * gi;
            }
            gammas.push(g);
        }
        let base: Vec<f64> = (0..n).map(|i| x[i] + dt * b[i] - dt * comp[i]).collect();
        let finite = base.iter().chain(&sigma).chain(gammas.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::numerical(
                "step_coefficients",
                format!("non-finite coefficient at t={t}, x={x:?}, u={u:?}, v={v:?}"),
            ));
        }
        Ok(Self { base, sigma, gammas, n, d })
    }

    /// Euler update for a Brownian increment and a list of jumps (atom indices).
    pub fn apply(&self, db: &[f64], jumps: impl IntoIterator<Item = usize>, out: &mut [f64]) {
        for i in 0..self.n {
            let row = &self.sigma[i * self.d..(i + 1) * self.d];
            let mut acc = self.base[i];
            for (s, w) in row.iter().zip(db) {
                acc += s * w;
            }
            out[i] = acc;
        }
        for a in jumps {
            for (o, g) in out.iter_mut().zip(&self.gammas[a]) {
                *o += g;
            }
        }
    }
}

/// Quadrature and jump alternatives for one step of size `dt`.
#[derive(Debug, Clone)]
pub struct StepRule {
    pub rule: TensorRule,
    pub dt: f64,
    pub sqrt_dt: f64,
    /// Probabilities of "no jump" followed by one entry per atom.
    pub jump_probs: Vec<f64>,
    /// Brownian increments `√δ ξ` per quadrature point, row-major.
    pub increments: Vec<f64>,
}

impl StepRule {
    pub fn new(levy: &LevyMeasure, d: usize, gauss: usize, dt: f64) -> Result<Self> {
        let rule = TensorRule::new(&GaussHermite::new(gauss)?, d)?;
        let mass = levy.total_rate() * dt;
        if mass > MAX_JUMP_MASS + 1e-12 {
            return Err(Error::Stability(format!(
                "jump mass Λδ = {mass} exceeds {MAX_JUMP_MASS}; use at least {} steps per unit time",
                (levy.total_rate() / MAX_JUMP_MASS).ceil()
            )));
        }
        let mut jump_probs = Vec::with_capacity(levy.len() + 1);
        jump_probs.push(1.0 - mass);
        jump_probs.extend(levy.atoms.iter().map(|a| a.rate * dt));
        let sqrt_dt = dt.sqrt();
        let increments = rule.points.iter().map(|p| p * sqrt_dt).collect();
        Ok(Self {
            rule,
            dt,
            sqrt_dt,
            jump_probs,
            increments,
        })
    }

    pub fn n_alternatives(&self) -> usize {
        self.jump_probs.len()
    }

    /// Number of children of every tree node.
    pub fn branching(&self) -> usize {
        self.rule.len() * self.jump_probs.len()
    }

    pub fn increment(&self, q: usize) -> &[f64] {
        let d = self.rule.dim;
        &self.increments[q * d..(q + 1) * d]
    }

    /// State reached through quadrature point `q` and jump alternative `alt`
    /// (0 = no jump, `i + 1` = atom `i`).
    pub fn child(&self, coeffs: &StepCoefficients, q: usize, alt: usize, out: &mut [f64]) {
        let jump = if alt == 0 { None } else { Some(alt - 1) };
        coeffs.apply(self.increment(q), jump, out);
    }

    /// Probability of child `(q, alt)`.
    pub fn child_prob(&self, q: usize, alt: usize) -> f64 {
        self.rule.weights[q] * self.jump_probs[alt]
    }
}

/// Refuses step sizes for which the implicit update is not a contraction or
/// the jump expansion is not a probability.
pub fn check_step_size(spec: &ProblemSpec, dt: f64) -> Result<()> {
    let c = spec.lipschitz_c;
    if dt * c >= 1.0 {
        return Err(Error::Stability(format!(
            "δ·C = {} >= 1; use more than {} steps per unit time",
            dt * c,
            c.floor()
        )));
    }
    let mass = spec.levy.total_rate() * dt;
    if mass > MAX_JUMP_MASS + 1e-12 {
        return Err(Error::Stability(format!(
            "jump mass Λδ = {mass} exceeds {MAX_JUMP_MASS}"
        )));
    }
    Ok(())
}

/// Conditional moments of a continuation value over one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMoments {
    /// `E[η(X')]`.
    pub y_bar: f64,
    /// `E[η(X') ΔB] / δ`.
    pub z: Vec<f64>,
    /// `E[η(X') | jump from atom i] - E[η(X') | no jump]`.
    pub k: Vec<f64>,
}

/// Output of the backward operator at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct StepValue {
    pub y: f64,
    pub y_bar: f64,
    pub z: Vec<f64>,
    pub k: Vec<f64>,
    pub k_bar: f64,
}

/// Computes the moments from child values laid out as `[alt][q]`.
pub fn moments_from_children(rule: &StepRule, children: &[f64]) -> StepMoments {
    let nq = rule.rule.len();
    let d = rule.rule.dim;
    let mut cond = vec![0.0; rule.n_alternatives()];
    let mut z = vec![0.0; d];
    let mut y_bar = 0.0;
    for (alt, c) in cond.iter_mut().enumerate() {
        let p = rule.jump_probs[alt];
        for q in 0..nq {
            let val = children[alt * nq + q];
            let w = rule.rule.weights[q];
            *c += w * val;
            let xi = rule.rule.point(q);
            for (zj, xj) in z.iter_mut().zip(xi) {
                *zj += p * w * val * xj;
            }
        }
        y_bar += p * *c;
    }
    for zj in &mut z {
        *zj /= rule.sqrt_dt;
    }
    let k = cond[1..].iter().map(|c| c - cond[0]).collect();
    StepMoments { y_bar, z, k }
}

/// Evaluates `η` at every child of `(coeffs, rule)`, laid out as `[alt][q]`.
pub fn child_values(rule: &StepRule, coeffs: &StepCoefficients, mut eta: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let nq = rule.rule.len();
    let mut out = Vec::with_capacity(nq * rule.n_alternatives());
    let mut state = vec![0.0; coeffs.n];
    for alt in 0..rule.n_alternatives() {
        for q in 0..nq {
            rule.child(coeffs, q, alt, &mut state);
            out.push(eta(&state)?);
        }
    }
    Ok(out)
}

/// Solves `y = ȳ + δ f(t, x, y, z, k̄, u, v)` given the step moments.
#[allow(clippy::too_many_arguments)]
pub fn implicit_update(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    u: &[f64],
    v: &[f64],
    dt: f64,
    moments: StepMoments,
    tol: f64,
) -> Result<StepValue> {
    let co = spec.coefficients.as_ref();
    let k_bar: f64 = spec
        .levy
        .atoms
        .iter()
        .zip(&moments.k)
        .map(|(a, k)| a.rate * k * co.jump_weight(x, &a.mark))
        .sum();
    let mut y = moments.y_bar;
    let mut converged = false;
    for _ in 0..MAX_FIXED_POINT_ITERATIONS {
        let next = moments.y_bar + dt * co.driver(t, x, y, &moments.z, k_bar, u, v);
        let change = (next - y).abs();
        y = next;
        if change <= tol * y.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged || !y.is_finite() {
        return Err(Error::numerical(
            "implicit_update",
            format!(
                "fixed point not converged in {MAX_FIXED_POINT_ITERATIONS} iterations at t={t}, x={x:?}, u={u:?}, v={v:?}"
            ),
        ));
    }
    Ok(StepValue {
        y,
        y_bar: moments.y_bar,
        z: moments.z,
        k: moments.k,
        k_bar,
    })
}

/// The full backward step `G^{t,x;u,v}_{t,t+δ}[η]`.
#[allow(clippy::too_many_arguments)]
pub fn backward_step(
    spec: &ProblemSpec,
    rule: &StepRule,
    t: f64,
    x: &[f64],
    u: &[f64],
    v: &[f64],
    tol: f64,
    eta: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<StepValue> {
    let coeffs = StepCoefficients::new(spec, t, x, u, v, rule.dt)?;
    let children = child_values(rule, &coeffs, eta)?;
    if let Some(bad) = children.iter().position(|c| !c.is_finite()) {
        return Err(Error::numerical(
            "backward_step",
            format!("continuation value non-finite at child {bad} of t={t}, x={x:?}"),
        ));
    }
    let moments = moments_from_children(rule, &children);
    implicit_update(spec, t, x, u, v, rule.dt, moments, tol)
}
