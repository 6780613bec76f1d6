//! Hamiltonians of the Isaacs integro-PDEs, an explicit monotone
//! finite-difference scheme for them, and the Isaacs-gap checker.
//!
//! Time runs backwards: `Ψ_k = Ψ_{k+1} + δ H^∓(t_k, x, Ψ_{k+1})`, where the
//! lower equation takes `max_u min_v` and the upper one `min_v max_u` of the
//! discrete Hamiltonian at every node.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{inner_window, ValueField};
use crate::grid::{FieldSlice, StateGrid};
use crate::levy_paths::{mark_norm, TimeGrid};
use crate::oracle::{matrix_game, Which};
use crate::problem::ProblemSpec;

pub const DEFAULT_CFL: f64 = 0.9;
/// Jump targets may leave the box by this fraction of its width per side.
pub const EXTRAPOLATION_MARGIN: f64 = 0.5;

/// Terms of the Hamiltonian at one `(t, x, u, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianEval {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: usize,
    pub v: usize,
    /// `½ tr(σσᵀ D²Ψ) + DΨ·b`.
    pub a_term: f64,
    /// `Σ λ_i [Ψ(x+γ_i) - Ψ(x) - DΨ·γ_i]`; atoms with `|e_i| < δ_j` by the
    /// second-order expansion `½ γᵀ D²Ψ γ`.
    pub b_nonlocal: f64,
    /// `Σ λ_i [Ψ(x+γ_i) - Ψ(x)] l(x, e_i)`, fed to the driver's `k` slot.
    pub c_nonlocal: f64,
    pub f_term: f64,
    pub total: f64,
}

/// Central first and second differences of a field at `x`, step `h` per axis.
struct Derivatives {
    value: f64,
    grad: Vec<f64>,
    /// Row-major `n x n`.
    hess: Vec<f64>,
}

fn derivatives(psi: &dyn FieldSlice, x: &[f64], h: &[f64]) -> Derivatives {
    let n = x.len();
    let value = psi.eval(x);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    let mut p = x.to_vec();
    for a in 0..n {
        p[a] = x[a] + h[a];
        let up = psi.eval(&p);
        p[a] = x[a] - h[a];
        let down = psi.eval(&p);
        p[a] = x[a];
        grad[a] = (up - down) / (2.0 * h[a]);
        hess[a * n + a] = (up - 2.0 * value + down) / (h[a] * h[a]);
        for b in 0..a {
            let mut corner = |sa: f64, sb: f64| {
                p[a] = x[a] + sa * h[a];
                p[b] = x[b] + sb * h[b];
                let v = psi.eval(&p);
                p[a] = x[a];
                p[b] = x[b];
                v
            };
            let mixed = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * h[a] * h[b]);
            hess[a * n + b] = mixed;
            hess[b * n + a] = mixed;
        }
    }
    Derivatives { value, grad, hess }
}

fn check_margin(sgrid: &StateGrid, target: &[f64], atom: usize) -> Result<()> {
    let lo = sgrid.lower();
    let hi = sgrid.upper();
    for (a, y) in target.iter().enumerate() {
        let m = EXTRAPOLATION_MARGIN * (hi[a] - lo[a]);
        if *y < lo[a] - m || *y > hi[a] + m {
            return Err(Error::Domain(format!(
                "jump of atom {atom} lands at {target:?}, beyond the extrapolation margin of the box [{lo:?}, {hi:?}]"
            )));
        }
    }
    Ok(())
}

/// Frozen coefficients of the equation at one `(t, x, u, v)`.
struct LocalCoefficients {
    b: Vec<f64>,
    sigma: Vec<f64>,
    gammas: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

fn local(spec: &ProblemSpec, t: f64, x: &[f64], u: &[f64], v: &[f64]) -> LocalCoefficients {
    let n = spec.n();
    let co = spec.coefficients.as_ref();
    let mut b = vec![0.0; n];
    co.drift(t, x, u, v, &mut b);
    let mut sigma = vec![0.0; n * spec.d()];
    co.diffusion(t, x, u, v, &mut sigma);
    let mut gammas = Vec::with_capacity(spec.levy.len());
    let mut weights = Vec::with_capacity(spec.levy.len());
    for atom in &spec.levy.atoms {
        let mut g = vec![0.0; n];
        co.jump(t, x, u, v, &atom.mark, &mut g);
        gammas.push(g);
        weights.push(co.jump_weight(x, &atom.mark));
    }
    LocalCoefficients {
        b,
        sigma,
        gammas,
        weights,
    }
}

fn diffusion_matrix(sigma: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..d).map(|k| sigma[i * d + k] * sigma[j * d + k]).sum();
        }
    }
    a
}

/// The Hamiltonian of `psi` at `(t, x, u, v)` with central differences of
/// step `sgrid`'s largest spacing and jump targets read from `psi`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    spec: &ProblemSpec,
    psi: &dyn FieldSlice,
    sgrid: &StateGrid,
    t: f64,
    x: &[f64],
    u: usize,
    v: usize,
    delta_j: f64,
) -> Result<HamiltonianEval> {
    let n = spec.n();
    let d = spec.d();
    if x.len() != n || sgrid.dim() != n {
        return Err(Error::Dimension(format!("point {x:?} or grid does not match state dimension {n}")));
    }
    let h = vec![sgrid.max_spacing(); n];
    let der = derivatives(psi, x, &h);
    let c = local(spec, t, x, spec.u_set.point(u), spec.v_set.point(v));
    let a = diffusion_matrix(&c.sigma, n, d);
    let mut a_term = 0.0;
    for i in 0..n {
        a_term += c.b[i] * der.grad[i];
        for j in 0..n {
            a_term += 0.5 * a[i * n + j] * der.hess[i * n + j];
        }
    }
    let mut b_nonlocal = 0.0;
    let mut c_nonlocal = 0.0;
    let mut target = vec![0.0; n];
    for (i, atom) in spec.levy.atoms.iter().enumerate() {
        let g = &c.gammas[i];
        for k in 0..n {
            target[k] = x[k] + g[k];
        }
        check_margin(sgrid, &target, i)?;
        let jump = psi.eval(&target) - der.value;
        c_nonlocal += atom.rate * jump * c.weights[i];
        if mark_norm(&atom.mark) < delta_j {
            let mut quad = 0.0;
            for p in 0..n {
                for q in 0..n {
                    quad += g[p] * der.hess[p * n + q] * g[q];
                }
            }
            b_nonlocal += atom.rate * 0.5 * quad;
        } else {
            let lin: f64 = g.iter().zip(&der.grad).map(|(a, b)| a * b).sum();
            b_nonlocal += atom.rate * (jump - lin);
        }
    }
    let z: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| der.grad[i] * c.sigma[i * d + j]).sum())
        .collect();
    let f_term = spec.coefficients.driver(
        t,
        x,
        der.value,
        &z,
        c_nonlocal,
        spec.u_set.point(u),
        spec.v_set.point(v),
    );
    let total = a_term + b_nonlocal + f_term;
    if !total.is_finite() {
        return Err(Error::numerical(
            "hamiltonian",
            format!("non-finite Hamiltonian at t={t}, x={x:?}, u={u}, v={v}"),
        ));
    }
    Ok(HamiltonianEval {
        t,
        x: x.to_vec(),
        u,
        v,
        a_term,
        b_nonlocal,
        c_nonlocal,
        f_term,
        total,
    })
}

// ---------------------------------------------------------------------------
// Explicit monotone scheme
// ---------------------------------------------------------------------------

/// Discretization data of one solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PideScheme {
    pub grid: TimeGrid,
    pub sgrid: StateGrid,
    /// Atoms with `|e| < delta_j` enter through the second-order expansion.
    pub delta_j: f64,
    pub cfl_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PideSolution {
    pub which: Which,
    pub grid: TimeGrid,
    pub sgrid: StateGrid,
    /// `values[k][node]`.
    pub values: Vec<Vec<f64>>,
    /// `δ · max rate` actually used.
    pub cfl: f64,
    /// `max |Ψ_k - Ψ_{k+1}|`.
    pub max_increment: f64,
}

impl PideSolution {
    pub fn value_at(&self, step: usize, x: &[f64]) -> f64 {
        self.sgrid.interpolate(&self.values[step], x)
    }
}

/// Probe of `|∂f/∂z|` by unit differences at the given arguments.
fn z_sensitivity(spec: &ProblemSpec, t: f64, x: &[f64], u: &[f64], v: &[f64]) -> Vec<f64> {
    let d = spec.d();
    let co = spec.coefficients.as_ref();
    let zero = vec![0.0; d];
    let base = co.driver(t, x, 0.0, &zero, 0.0, u, v);
    (0..d)
        .map(|j| {
            let mut z = zero.clone();
            z[j] = 1.0;
            (co.driver(t, x, 0.0, &z, 0.0, u, v) - base).abs()
        })
        .collect()
}

/// Largest `rate` such that the step coefficient of `Ψ_k(x_i)` is
/// `1 - δ rate`, over times, nodes and control pairs, plus the first
/// violation of the z-condition if any.
fn max_rate(spec: &ProblemSpec, scheme: &PideScheme) -> (f64, Option<String>) {
    let n = spec.n();
    let d = spec.d();
    let sg = &scheme.sgrid;
    let h: Vec<f64> = (0..n).map(|a| sg.min_spacing(a)).collect();
    let c_lip = spec.lipschitz_c;
    let nodes = sg.nodes();
    let times: Vec<f64> = (0..scheme.grid.n_steps).map(|k| scheme.grid.time(k)).collect();
    let results: Vec<(f64, Option<String>)> = nodes
        .par_iter()
        .map(|x| {
            let mut worst: f64 = 0.0;
            let mut violation = None;
            for &t in &times {
                for ui in 0..spec.u_set.len() {
                    for vi in 0..spec.v_set.len() {
                        let (u, v) = (spec.u_set.point(ui), spec.v_set.point(vi));
                        let c = local(spec, t, x, u, v);
                        let a = small_jump_diffusion(spec, &c, n, d, scheme.delta_j);
                        let bt = compensated_drift(spec, &c, scheme.delta_j);
                        let mut rate = 0.0;
                        for p in 0..n {
                            rate += a[p * n + p] / (h[p] * h[p]) + bt[p].abs() / h[p];
                            for q in 0..n {
                                if q != p {
                                    rate += a[p * n + q].abs() / (2.0 * h[p] * h[q]);
                                }
                            }
                        }
                        let mut large_mass = 0.0;
                        let mut weighted = 0.0;
                        for (i, atom) in spec.levy.atoms.iter().enumerate() {
                            if mark_norm(&atom.mark) >= scheme.delta_j {
                                large_mass += atom.rate;
                            }
                            weighted += atom.rate * c.weights[i];
                        }
                        rate += large_mass + c_lip * (1.0 + weighted);
                        worst = worst.max(rate);
                        if violation.is_none() {
                            let lz = z_sensitivity(spec, t, x, u, v);
                            for p in 0..n {
                                let drive: f64 = (0..d).map(|j| lz[j] * c.sigma[p * d + j].abs()).sum();
                                if drive * h[p] > a[p * n + p] * (1.0 + 1e-12) {
                                    violation = Some(format!(
                                        "z-dependence of the driver needs Δx ≤ σ²/|f_z σ| on axis {p} (x={x:?}, Δx={})",
                                        h[p]
                                    ));
                                }
                            }
                        }
                    }
                }
            }
            (worst, violation)
        })
        .collect();
    let rate = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let violation = results.into_iter().find_map(|r| r.1);
    (rate, violation)
}

/// `σσᵀ` plus `Σ λ γγᵀ` over the atoms below the split.
fn small_jump_diffusion(spec: &ProblemSpec, c: &LocalCoefficients, n: usize, d: usize, delta_j: f64) -> Vec<f64> {
    let mut a = diffusion_matrix(&c.sigma, n, d);
    for (i, atom) in spec.levy.atoms.iter().enumerate() {
        if mark_norm(&atom.mark) < delta_j {
            let g = &c.gammas[i];
            for p in 0..n {
                for q in 0..n {
                    a[p * n + q] += atom.rate * g[p] * g[q];
                }
            }
        }
    }
    a
}

/// `b - Σ λ γ` over the atoms at or above the split.
fn compensated_drift(spec: &ProblemSpec, c: &LocalCoefficients, delta_j: f64) -> Vec<f64> {
    let mut bt = c.b.clone();
    for (i, atom) in spec.levy.atoms.iter().enumerate() {
        if mark_norm(&atom.mark) >= delta_j {
            for (b, g) in bt.iter_mut().zip(&c.gammas[i]) {
                *b -= atom.rate * g;
            }
        }
    }
    bt
}

/// CFL number `δ · max rate` of a scheme.
pub fn cfl_number(spec: &ProblemSpec, scheme: &PideScheme) -> f64 {
    scheme.grid.dt() * max_rate(spec, scheme).0
}

/// Smallest step count on `[t0, T]` meeting the CFL target on `sgrid`.
pub fn cfl_steps(spec: &ProblemSpec, t0: f64, sgrid: &StateGrid, delta_j: f64, cfl_target: f64) -> Result<usize> {
    let probe = PideScheme {
        grid: TimeGrid::new(t0, spec.horizon, 1)?,
        sgrid: sgrid.clone(),
        delta_j,
        cfl_target,
    };
    let (rate, _) = max_rate(spec, &probe);
    Ok(((spec.horizon - t0) * rate / cfl_target).ceil().max(1.0) as usize)
}

fn boundary_fill(sg: &StateGrid, values: &mut [f64]) {
    let n = sg.dim();
    for a in 0..n {
        let len = sg.axes[a].len();
        if len < 3 {
            continue;
        }
        let stride = sg.stride(a);
        let ax = &sg.axes[a];
        for flat in 0..sg.len() {
            let idx = sg.multi_index(flat);
            if idx[a] != 0 && idx[a] != len - 1 {
                continue;
            }
            if (a + 1..n).any(|b| idx[b] == 0 || idx[b] + 1 == sg.axes[b].len()) {
                continue;
            }
            let (n1, n2, i1, i2) = if idx[a] == 0 {
                (flat + stride, flat + 2 * stride, 1, 2)
            } else {
                (flat - stride, flat - 2 * stride, len - 2, len - 3)
            };
            let slope = (values[n2] - values[n1]) / (ax[i2] - ax[i1]);
            values[flat] = values[n1] + (ax[idx[a]] - ax[i1]) * slope;
        }
    }
}

/// The scheme's discrete Hamiltonian at interior node `i` for one control pair.
#[allow(clippy::too_many_arguments)]
fn discrete_hamiltonian(
    spec: &ProblemSpec,
    sg: &StateGrid,
    psi: &[f64],
    t: f64,
    i: usize,
    x: &[f64],
    ui: usize,
    vi: usize,
    delta_j: f64,
) -> Result<f64> {
    let n = spec.n();
    let d = spec.d();
    let (u, v) = (spec.u_set.point(ui), spec.v_set.point(vi));
    let c = local(spec, t, x, u, v);
    let a = small_jump_diffusion(spec, &c, n, d, delta_j);
    let bt = compensated_drift(spec, &c, delta_j);
    let idx = sg.multi_index(i);
    let value = psi[i];
    let mut h_total = 0.0;
    let mut central = vec![0.0; n];
    for p in 0..n {
        let s = sg.stride(p);
        let ax = &sg.axes[p];
        let (hm, hp) = (ax[idx[p]] - ax[idx[p] - 1], ax[idx[p] + 1] - ax[idx[p]]);
        let fwd = (psi[i + s] - value) / hp;
        let bwd = (value - psi[i - s]) / hm;
        central[p] = (psi[i + s] - psi[i - s]) / (hp + hm);
        h_total += bt[p].max(0.0) * fwd + bt[p].min(0.0) * bwd;
        h_total += 0.5 * a[p * n + p] * 2.0 * (fwd - bwd) / (hp + hm);
        for q in 0..p {
            let apq = a[p * n + q];
            if apq == 0.0 {
                continue;
            }
            let sq = sg.stride(q);
            let axq = &sg.axes[q];
            let hq = axq[idx[q] + 1] - axq[idx[q] - 1];
            let mixed = (psi[i + s + sq] - psi[i + s - sq] - psi[i - s + sq] + psi[i - s - sq]) / ((hp + hm) * hq);
            h_total += apq * mixed;
        }
    }
    let mut k_bar = 0.0;
    let mut target = vec![0.0; n];
    for (j, atom) in spec.levy.atoms.iter().enumerate() {
        let g = &c.gammas[j];
        for p in 0..n {
            target[p] = x[p] + g[p];
        }
        check_margin(sg, &target, j)?;
        let jump = sg.interpolate(psi, &target) - value;
        k_bar += atom.rate * c.weights[j] * jump;
        if mark_norm(&atom.mark) >= delta_j {
            h_total += atom.rate * jump;
        }
    }
    let z: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|p| central[p] * c.sigma[p * d + j]).sum())
        .collect();
    h_total += spec.coefficients.driver(t, x, value, &z, k_bar, u, v);
    Ok(h_total)
}

/// One backward step `Ψ_k` from `Ψ_{k+1}` at time `t_k`.
pub fn pide_step(spec: &ProblemSpec, which: Which, scheme: &PideScheme, k: usize, next: &[f64]) -> Result<Vec<f64>> {
    let sg = &scheme.sgrid;
    let t = scheme.grid.time(k);
    let dt = scheme.grid.dt();
    let nu = spec.u_set.len();
    let nv = spec.v_set.len();
    let mut out: Vec<f64> = (0..sg.len())
        .into_par_iter()
        .map(|i| {
            if !sg.is_interior(i, 1) {
                return Ok(next[i]);
            }
            let x = sg.node(i);
            let mut payoff = vec![0.0; nu * nv];
            for ui in 0..nu {
                for vi in 0..nv {
                    payoff[ui * nv + vi] = discrete_hamiltonian(spec, sg, next, t, i, &x, ui, vi, scheme.delta_j)?;
                }
            }
            let (h, _, _) = matrix_game(&payoff, nu, nv, which);
            let val = next[i] + dt * h;
            if !val.is_finite() {
                return Err(Error::numerical(
                    "solve_pide",
                    format!("non-finite Hamiltonian at step {k}, x={x:?}"),
                ));
            }
            Ok(val)
        })
        .collect::<Result<_>>()?;
    boundary_fill(sg, &mut out);
    Ok(out)
}

fn check_scheme(spec: &ProblemSpec, scheme: &PideScheme) -> Result<f64> {
    if !(scheme.cfl_target > 0.0 && scheme.cfl_target <= 1.0) {
        return Err(Error::Config(format!("CFL target {} outside (0, 1]", scheme.cfl_target)));
    }
    if scheme.sgrid.dim() != spec.n() {
        return Err(Error::Dimension("state grid does not match the problem".into()));
    }
    if scheme.sgrid.counts().iter().any(|c| *c < 3) {
        return Err(Error::Config("the scheme needs at least 3 nodes per axis".into()));
    }
    let (rate, violation) = max_rate(spec, scheme);
    let cfl = scheme.grid.dt() * rate;
    if let Some(msg) = violation {
        return Err(Error::Stability(msg));
    }
    if cfl > scheme.cfl_target {
        let span = scheme.grid.horizon - scheme.grid.t0;
        let needed = (span * rate / scheme.cfl_target).ceil() as usize;
        return Err(Error::Stability(format!(
            "CFL number {cfl:.4} exceeds {}; use at least {needed} steps",
            scheme.cfl_target
        )));
    }
    Ok(cfl)
}

/// Explicit backward solve of the lower or upper Isaacs equation.
pub fn solve_pide(spec: &ProblemSpec, which: Which, scheme: &PideScheme) -> Result<PideSolution> {
    let cfl = check_scheme(spec, scheme)?;
    let n = scheme.grid.n_steps;
    let mut values = vec![Vec::new(); n + 1];
    values[n] = scheme.sgrid.nodes().iter().map(|x| spec.terminal(x)).collect();
    let mut max_increment: f64 = 0.0;
    for k in (0..n).rev() {
        let row = pide_step(spec, which, scheme, k, &values[k + 1])?;
        for (a, b) in row.iter().zip(&values[k + 1]) {
            max_increment = max_increment.max((a - b).abs());
        }
        values[k] = row;
    }
    Ok(PideSolution {
        which,
        grid: scheme.grid,
        sgrid: scheme.sgrid.clone(),
        values,
        cfl,
        max_increment,
    })
}

/// Sup-norm distance at `t0` between a PIDE solution and a value field on
/// the central `window` fraction of the box.
pub fn cross_distance(pide: &PideSolution, field: &ValueField, window: f64) -> f64 {
    inner_window(&pide.sgrid, window)
        .into_iter()
        .map(|i| (pide.values[0][i] - field.value_at(0, &pide.sgrid.node(i))).abs())
        .fold(0.0, f64::max)
}

/// Writes `step, time, node, x_1..x_n, value`.
pub fn write_pide_csv<W: std::io::Write>(sol: &PideSolution, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "time".into(), "node".into()];
    header.extend((1..=sol.sgrid.dim()).map(|i| format!("x_{i}")));
    header.push("value".into());
    w.write_record(&header)?;
    for (k, row) in sol.values.iter().enumerate() {
        for (i, value) in row.iter().enumerate() {
            let mut rec = vec![k.to_string(), sol.grid.time(k).to_string(), i.to_string()];
            rec.extend(sol.sgrid.node(i).iter().map(|x| x.to_string()));
            rec.push(value.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Central fraction of the box used by [`cross_rung`].
pub const CROSS_WINDOW: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossRung {
    pub dx: f64,
    pub nodes: usize,
    pub pide_steps: usize,
    pub dp_steps: usize,
    pub cfl: f64,
    pub distance: f64,
}

/// PIDE solution against the dynamic-programming field on the cube
/// `[-half_width, half_width]^n` with spacing `dx`.
///
/// The PIDE runs at its CFL step. The DP recursion gets its own step
/// `δ ≈ Δx`: its interpolation error behaves like `Δx²/δ`, so reusing the
/// much smaller CFL step would make it diverge under refinement.
pub fn cross_rung(
    spec: &ProblemSpec,
    which: Which,
    half_width: f64,
    dx: f64,
    cfl_target: f64,
    engine: &crate::bsde::Engine,
) -> Result<CrossRung> {
    if !(dx > 0.0 && half_width > 0.0) {
        return Err(Error::Config(format!("cross-solver rung needs dx > 0 and a box, got dx={dx}")));
    }
    let nodes = (2.0 * half_width / dx).round() as usize + 1;
    let sgrid = StateGrid::cube(spec.n(), half_width, nodes)?;
    let span = spec.horizon;
    let pide_steps = cfl_steps(spec, 0.0, &sgrid, 0.0, cfl_target)?;
    let scheme = PideScheme {
        grid: TimeGrid::new(0.0, span, pide_steps)?,
        sgrid: sgrid.clone(),
        delta_j: 0.0,
        cfl_target,
    };
    let pide = solve_pide(spec, which, &scheme)?;
    let jump_steps = spec.levy.total_rate() * span / crate::step::MAX_JUMP_MASS;
    let stiff_steps = spec.lipschitz_c * span / 0.9;
    let dp_steps = ((span / dx).ceil()).max(jump_steps.ceil()).max(stiff_steps.ceil()) as usize;
    let field = crate::game::solve_value(spec, which, &TimeGrid::new(0.0, span, dp_steps)?, &sgrid, engine)?;
    Ok(CrossRung {
        dx,
        nodes,
        pide_steps,
        dp_steps,
        cfl: pide.cfl,
        distance: cross_distance(&pide, &field, CROSS_WINDOW),
    })
}

// ---------------------------------------------------------------------------
// Scheme diagnostics
// ---------------------------------------------------------------------------

/// Nodes at least one layer inside the box whose jump targets stay inside it.
pub fn monotone_nodes(spec: &ProblemSpec, scheme: &PideScheme) -> Vec<usize> {
    let sg = &scheme.sgrid;
    let n = spec.n();
    let times: Vec<f64> = (0..scheme.grid.n_steps).map(|k| scheme.grid.time(k)).collect();
    (0..sg.len())
        .filter(|&i| {
            if !sg.is_interior(i, 1) {
                return false;
            }
            let x = sg.node(i);
            let mut target = vec![0.0; n];
            times.iter().all(|&t| {
                (0..spec.u_set.len()).all(|ui| {
                    (0..spec.v_set.len()).all(|vi| {
                        let c = local(spec, t, &x, spec.u_set.point(ui), spec.v_set.point(vi));
                        c.gammas.iter().all(|g| {
                            for p in 0..n {
                                target[p] = x[p] + g[p];
                            }
                            sg.contains(&target)
                        })
                    })
                })
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub pairs: usize,
    pub nodes_checked: usize,
    /// `max (step(Ψ) - step(Ψ'))` over checked nodes; ≤ 0 for a monotone step.
    pub worst_violation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Random ordered pairs `Ψ ≤ Ψ'` pushed through one step at `k`.
///
/// Only nodes whose stencil and jump targets lie inside the box are checked;
/// linear extrapolation has negative weights and is not monotone.
pub fn monotonicity_check(
    spec: &ProblemSpec,
    which: Which,
    scheme: &PideScheme,
    k: usize,
    pairs: usize,
    seed: u64,
) -> Result<MonotonicityReport> {
    check_scheme(spec, scheme)?;
    let nodes = monotone_nodes(spec, scheme);
    let len = scheme.sgrid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let base: Vec<f64> = scheme.sgrid.nodes().iter().map(|x| spec.terminal(x)).collect();
        let lo: Vec<f64> = base.iter().map(|b| b + rng.random_range(-0.5..0.5)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.0..0.5)).collect();
        debug_assert_eq!(lo.len(), len);
        let a = pide_step(spec, which, scheme, k, &lo)?;
        let b = pide_step(spec, which, scheme, k, &hi)?;
        for &i in &nodes {
            worst = worst.max(a[i] - b[i]);
        }
    }
    let tolerance = 1e-12;
    Ok(MonotonicityReport {
        pairs,
        nodes_checked: nodes.len(),
        worst_violation: worst,
        tolerance,
        passed: !nodes.is_empty() && worst <= tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRung {
    pub dx: f64,
    pub max_error: f64,
    /// A-priori error bound `K·Δx²` of the rung.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub rungs: Vec<ConsistencyRung>,
    /// `log2(e_r / e_{r+1})` per refinement; informational, since the
    /// offset of the jump targets inside their cells changes between rungs.
    pub orders: Vec<f64>,
    /// `max e_r / Δx_r²`, the measured constant of the quadratic rate.
    pub constant: f64,
    /// The `K` of the bound `K·Δx²`.
    pub bound_constant: f64,
    pub passed: bool,
}

/// Discrete against analytic Hamiltonian of the quadratic
/// `Ψ(x) = c0 + b·x + q|x|²` at `points`, over a halving ladder of uniform
/// grids with nodal values of `Ψ`.
///
/// For such data the central differences are exact wherever the stencil is
/// interior (interpolation errors repeat with period `Δx`), so the error
/// comes from the interpolated values `Ψ(x)` and `Ψ(x+γ_i)`, each off by at
/// most `E = n|q|Δx²/4`. Lipschitz bounds of the driver in `(y, k)` with the
/// declared `C` and `0 ≤ l ≤ C(1∧|e|)` give
/// `|error| ≤ E (2Λ + 2C² Σ λ_i (1∧|e_i|) + C)`; every rung must meet it.
#[allow(clippy::too_many_arguments)]
pub fn consistency_check(
    spec: &ProblemSpec,
    quadratic: (f64, f64, f64),
    base: &StateGrid,
    points: &[Vec<f64>],
    t: f64,
    rungs: usize,
    delta_j: f64,
) -> Result<ConsistencyReport> {
    let (c0, b, q) = quadratic;
    let n = spec.n();
    let d = spec.d();
    let psi = |x: &[f64]| c0 + b * x.iter().sum::<f64>() + q * x.iter().map(|v| v * v).sum::<f64>();
    let grad = |x: &[f64]| x.iter().map(|xi| b + 2.0 * q * xi).collect::<Vec<f64>>();
    let c = spec.lipschitz_c;
    let small_mass = crate::levy_paths::compensator_integral(&spec.levy, |e| mark_norm(e).min(1.0));
    let lipschitz_factor = 2.0 * spec.levy.total_rate() + 2.0 * c * c * small_mass + c;
    let bound_constant = n as f64 * q.abs() / 4.0 * lipschitz_factor;
    let mut out = Vec::with_capacity(rungs);
    let mut sg = base.clone();
    for r in 0..rungs {
        if r > 0 {
            sg = sg.refined();
        }
        let values: Vec<f64> = sg.nodes().iter().map(|x| psi(x)).collect();
        let field = crate::grid::GridField {
            grid: &sg,
            values: &values,
        };
        let mut max_error: f64 = 0.0;
        for x in points {
            for ui in 0..spec.u_set.len() {
                for vi in 0..spec.v_set.len() {
                    let got = hamiltonian(spec, &field, &sg, t, x, ui, vi, delta_j)?.total;
                    let (u, v) = (spec.u_set.point(ui), spec.v_set.point(vi));
                    let c = local(spec, t, x, u, v);
                    let a = diffusion_matrix(&c.sigma, n, d);
                    let g = grad(x);
                    let mut exact = (0..n).map(|p| c.b[p] * g[p] + q * a[p * n + p]).sum::<f64>();
                    let mut k_bar = 0.0;
                    for (j, atom) in spec.levy.atoms.iter().enumerate() {
                        let target: Vec<f64> = x.iter().zip(&c.gammas[j]).map(|(a, b)| a + b).collect();
                        let jump = psi(&target) - psi(x);
                        let lin: f64 = c.gammas[j].iter().zip(&g).map(|(a, b)| a * b).sum();
                        exact += atom.rate * (jump - lin);
                        k_bar += atom.rate * jump * c.weights[j];
                    }
                    let z: Vec<f64> = (0..d).map(|j| (0..n).map(|p| g[p] * c.sigma[p * d + j]).sum()).collect();
                    exact += spec.coefficients.driver(t, x, psi(x), &z, k_bar, u, v);
                    max_error = max_error.max((got - exact).abs());
                }
            }
        }
        let dx = sg.max_spacing();
        out.push(ConsistencyRung {
            dx,
            max_error,
            bound: bound_constant * dx * dx,
        });
    }
    let orders: Vec<f64> = out
        .windows(2)
        .map(|w| (w[0].max_error / w[1].max_error).log2())
        .collect();
    let constant = out.iter().map(|r| r.max_error / (r.dx * r.dx)).fold(0.0, f64::max);
    // Round-off of the Hamiltonian itself sits on top of the bound.
    let passed = out.iter().all(|r| r.max_error <= r.bound * (1.0 + 1e-9) + 1e-10);
    Ok(ConsistencyReport {
        rungs: out,
        orders,
        constant,
        bound_constant,
        passed,
    })
}

// ---------------------------------------------------------------------------
// Isaacs gap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapWitness {
    pub step: usize,
    pub time: f64,
    pub node: usize,
    pub x: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub max_gap: f64,
    pub mean_gap: f64,
    pub argmax: Option<GapWitness>,
}

impl GapReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `|max_u min_v H - min_v max_u H|` of the probe field at every interior
/// node and every step of `grid`.
pub fn isaacs_gap(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    sgrid: &StateGrid,
    probe: &dyn FieldSlice,
    delta_j: f64,
) -> Result<GapReport> {
    let nu = spec.u_set.len();
    let nv = spec.v_set.len();
    let interior: Vec<usize> = (0..sgrid.len()).filter(|&i| sgrid.is_interior(i, 1)).collect();
    let mut rows = Vec::new();
    for k in 0..grid.n_steps {
        let t = grid.time(k);
        let step: Vec<GapWitness> = interior
            .par_iter()
            .map(|&i| {
                let x = sgrid.node(i);
                let mut payoff = vec![0.0; nu * nv];
                for ui in 0..nu {
                    for vi in 0..nv {
                        payoff[ui * nv + vi] = hamiltonian(spec, probe, sgrid, t, &x, ui, vi, delta_j)?.total;
                    }
                }
                Ok(GapWitness {
                    step: k,
                    time: t,
                    node: i,
                    x,
                    lower: matrix_game(&payoff, nu, nv, Which::Lower).0,
                    upper: matrix_game(&payoff, nu, nv, Which::Upper).0,
                })
            })
            .collect::<Result<_>>()?;
        rows.extend(step);
    }
    let gap = |w: &GapWitness| (w.lower - w.upper).abs();
    let mut max_gap = 0.0;
    let mut argmax = None;
    let mut sum = 0.0;
    for w in &rows {
        let g = gap(w);
        sum += g;
        if argmax.is_none() || g > max_gap {
            max_gap = g;
            argmax = Some(w.clone());
        }
    }
    Ok(GapReport {
        max_gap,
        mean_gap: if rows.is_empty() { 0.0 } else { sum / rows.len() as f64 },
        argmax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FnField;
    use crate::levy_paths::{Atom, LevyMeasure};
    use crate::problem::{scenario, ControlSet, CustomCoefficients, Dims};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn custom(co: CustomCoefficients, levy: LevyMeasure) -> ProblemSpec {
        ProblemSpec::from_coefficients(
            Arc::new(co),
            Dims {
                state: 1,
                brownian: 1,
                mark: 1,
            },
            1.0,
            1.0,
            ControlSet::scalar("U", &[0.0]).unwrap(),
            ControlSet::scalar("V", &[0.0]).unwrap(),
            levy,
        )
        .unwrap()
    }

    fn one_atom(rate: f64) -> LevyMeasure {
        LevyMeasure::new(vec![Atom {
            mark: vec![1.0],
            rate,
        }])
        .unwrap()
    }

    #[test]
    fn vanishing_coefficients_give_zero() {
        let spec = custom(CustomCoefficients::default(), LevyMeasure::empty());
        let sg = StateGrid::cube(1, 2.0, 41).unwrap();
        let psi = FnField(|x: &[f64]| x[0].sin() * 3.0);
        let h = hamiltonian(&spec, &psi, &sg, 0.2, &[0.3], 0, 0, 0.0).unwrap();
        assert_eq!(h.total, 0.0);
    }

    #[test]
    fn linear_field_kills_compensated_jump() {
        let co = CustomCoefficients::default().with_jump(|_, _, _, _, e, out| out[0] = e[0]);
        let spec = custom(co, one_atom(0.7));
        let sg = StateGrid::cube(1, 2.0, 41).unwrap();
        let psi = FnField(|x: &[f64]| x[0]);
        let h = hamiltonian(&spec, &psi, &sg, 0.0, &[0.25], 0, 0, 0.0).unwrap();
        assert_abs_diff_eq!(h.b_nonlocal, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn quadratic_diffusion_term() {
        let s = 0.8;
        let co = CustomCoefficients::default().with_diffusion(move |_, _, _, _, out| out[0] = s);
        let spec = custom(co, LevyMeasure::empty());
        let sg = StateGrid::cube(1, 2.0, 41).unwrap();
        let psi = FnField(|x: &[f64]| x[0] * x[0]);
        let h = hamiltonian(&spec, &psi, &sg, 0.0, &[0.4], 0, 0, 0.0).unwrap();
        assert_abs_diff_eq!(h.total, s * s, epsilon = 1e-12);
    }

    #[test]
    fn small_jump_split_uses_second_order_term() {
        let co = CustomCoefficients::default().with_jump(|_, _, _, _, e, out| out[0] = e[0]);
        let spec = custom(co, one_atom(2.0));
        let sg = StateGrid::cube(1, 3.0, 61).unwrap();
        let psi = FnField(|x: &[f64]| x[0] * x[0]);
        let large = hamiltonian(&spec, &psi, &sg, 0.0, &[0.0], 0, 0, 0.0).unwrap();
        let small = hamiltonian(&spec, &psi, &sg, 0.0, &[0.0], 0, 0, 5.0).unwrap();
        // for a quadratic both forms agree: λ |γ|² = 2
        assert_abs_diff_eq!(large.b_nonlocal, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(small.b_nonlocal, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn jump_beyond_margin_is_a_domain_error() {
        let co = CustomCoefficients::default().with_jump(|_, _, _, _, _, out| out[0] = 50.0);
        let spec = custom(co, one_atom(0.1));
        let sg = StateGrid::cube(1, 1.0, 11).unwrap();
        let psi = FnField(|x: &[f64]| x[0]);
        match hamiltonian(&spec, &psi, &sg, 0.0, &[0.0], 0, 0, 0.0) {
            Err(Error::Domain(msg)) => assert!(msg.contains("atom 0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_dynamics_keep_phi_and_constant_driver_adds_ct() {
        let spec = scenario("zero_dynamics").unwrap();
        let sg = StateGrid::cube(1, 2.0, 21).unwrap();
        let scheme = PideScheme {
            grid: TimeGrid::new(0.0, 1.0, 10).unwrap(),
            sgrid: sg.clone(),
            delta_j: 0.0,
            cfl_target: DEFAULT_CFL,
        };
        let sol = solve_pide(&spec, Which::Lower, &scheme).unwrap();
        for (v, x) in sol.values[0].iter().zip(sg.nodes()) {
            assert_abs_diff_eq!(*v, x[0], epsilon = 1e-14);
        }
        let c = 0.3;
        let co = CustomCoefficients::default()
            .with_driver(move |_, _, _, _, _, _, _| c)
            .with_terminal(|x| x[0].cos());
        let spec = custom(co, LevyMeasure::empty());
        let sol = solve_pide(&spec, Which::Upper, &scheme).unwrap();
        // boundary nodes carry the linear extrapolation, not cos
        for i in (0..sg.len()).filter(|&i| sg.is_interior(i, 1)) {
            assert_abs_diff_eq!(sol.values[0][i], sg.node(i)[0].cos() + c, epsilon = 1e-14);
        }
    }

    #[test]
    fn cfl_violation_names_required_steps() {
        let spec = scenario("separated_drift").unwrap();
        let sg = StateGrid::cube(1, 2.0, 81).unwrap();
        let scheme = PideScheme {
            grid: TimeGrid::new(0.0, 1.0, 10).unwrap(),
            sgrid: sg.clone(),
            delta_j: 0.0,
            cfl_target: DEFAULT_CFL,
        };
        let needed = cfl_steps(&spec, 0.0, &sg, 0.0, DEFAULT_CFL).unwrap();
        match solve_pide(&spec, Which::Lower, &scheme) {
            Err(Error::Stability(msg)) => assert!(msg.contains(&format!("{needed} steps"))),
            other => panic!("unexpected {other:?}"),
        }
        let ok = PideScheme {
            grid: TimeGrid::new(0.0, 1.0, needed).unwrap(),
            ..scheme
        };
        assert!(cfl_number(&spec, &ok) <= DEFAULT_CFL);
    }

    #[test]
    fn one_sided_control_sets_have_no_gap() {
        let spec = scenario("jump_heavy").unwrap();
        let mut one = spec.clone();
        one.v_set = ControlSet::scalar("V", &[0.5]).unwrap();
        let sg = StateGrid::cube(1, 2.0, 21).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let probe = FnField(|x: &[f64]| x[0].sin() + 0.2 * x[0] * x[0]);
        let r = isaacs_gap(&one, &grid, &sg, &probe, 0.0).unwrap();
        assert_eq!(r.max_gap, 0.0);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert!(json.get("max_gap").is_some() && json.get("argmax").is_some());
    }
}
