//! The game datum: coefficients, control sets, the Lévy measure and the
//! horizon, plus hypothesis probing and the problem-file format.
//!
//! Coefficients come either from a serializable parametric family (the
//! general affine family or one of the named scenarios, which expand to
//! affine parameters) or from in-process closures via
//! [`CustomCoefficients`]. Closures are not serializable.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::levy_paths::{mark_norm, Atom, LevyMeasure};

pub const SCHEMA_VERSION: u32 = 1;

/// Dimensions `(n, d, l)` of state, Brownian motion and jump marks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub state: usize,
    pub brownian: usize,
    pub mark: usize,
}

/// Coefficient functions of the controlled jump diffusion and its cost.
///
/// All methods must be pure and re-entrant; solvers call them concurrently.
/// Vector outputs are written into caller-provided buffers: `drift` and
/// `jump` fill `n` entries, `diffusion` fills the row-major `n x d` matrix.
pub trait GameCoefficients: Send + Sync {
    fn drift(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]);
    fn jump(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], e: &[f64], out: &mut [f64]);
    #[allow(clippy::too_many_arguments)]
    fn driver(&self, t: f64, x: &[f64], y: f64, z: &[f64], k: f64, u: &[f64], v: &[f64]) -> f64;
    fn terminal(&self, x: &[f64]) -> f64;
    /// The weight `l(x, e)` through which the driver sees the jump component.
    fn jump_weight(&self, x: &[f64], e: &[f64]) -> f64;
    /// Dominating function `ρ(e)` of the jump coefficient.
    fn rho(&self, e: &[f64]) -> f64;
}

/// Finite set of control values for one player.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    pub label: String,
    pub points: Vec<Vec<f64>>,
}

impl ControlSet {
    pub fn new(label: &str, points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config(format!("control set {label} is empty")));
        }
        let dim = points[0].len();
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::Dimension(format!(
                    "control set {label}: point {i} has dimension {}, expected {dim}",
                    p.len()
                )));
            }
            if points[..i].contains(p) {
                return Err(Error::Config(format!(
                    "control set {label}: duplicate point {p:?}"
                )));
            }
        }
        Ok(Self {
            label: label.to_string(),
            points,
        })
    }

    /// Scalar controls.
    pub fn scalar(label: &str, values: &[f64]) -> Result<Self> {
        Self::new(label, values.iter().map(|v| vec![*v]).collect())
    }

    /// Uniform lattice on the box `[lo, hi]` with `counts[i]` points per axis.
    pub fn lattice(label: &str, lo: &[f64], hi: &[f64], counts: &[usize]) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != counts.len() || counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("lattice: inconsistent box specification".into()));
        }
        let axes: Vec<Vec<f64>> = (0..lo.len())
            .map(|i| {
                if counts[i] == 1 {
                    vec![0.5 * (lo[i] + hi[i])]
                } else {
                    (0..counts[i])
                        .map(|j| lo[i] + (hi[i] - lo[i]) * j as f64 / (counts[i] - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let total: usize = counts.iter().product();
        let mut points = Vec::with_capacity(total);
        for mut flat in 0..total {
            let mut p = vec![0.0; lo.len()];
            for i in (0..lo.len()).rev() {
                p[i] = axes[i][flat % counts[i]];
                flat /= counts[i];
            }
            points.push(p);
        }
        Self::new(label, points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }
}

// ---------------------------------------------------------------------------
// Affine family
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbsTerm {
    pub weight: f64,
    #[serde(default)]
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothAbsTerm {
    pub weight: f64,
    #[serde(default)]
    pub center: Vec<f64>,
    pub width: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinTerm {
    pub amp: f64,
    pub freq: f64,
}

/// `Φ(x) = c + a·x + q|x|² + w|x-c₁| + w'·sqrt(width² + |x-c₂|²) + A Σ sin(ω x_i)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalParams {
    #[serde(default)]
    pub constant: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub linear: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub quadratic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs: Option<AbsTerm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smooth_abs: Option<SmoothAbsTerm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sin: Option<SinTerm>,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

/// `f = c0 + cx·x + cy·y + cz·z + ck·k + cu·u + cv·v + cuv (u·v)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverParams {
    #[serde(default)]
    pub c0: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cx: Vec<f64>,
    #[serde(default)]
    pub cy: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cz: Vec<f64>,
    #[serde(default)]
    pub ck: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cu: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cv: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub cuv: f64,
}

/// `l(x, e) = (1 ∧ |e|) (l0 + lx · clamp((1 + x_1)/2, 0, 1))`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpWeightParams {
    #[serde(default)]
    pub l0: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub lx: f64,
}

/// Affine-in-x coefficients with control-dependent matrices.
///
/// `b = b0 + Bx x + Bu u + Bv v + buv (u·v)`;
/// `σ = S0 + Σ x_k Sx[k] + Σ u_a Su[a] + Σ v_b Sv[b]`;
/// `γ(e) = (G0 + Σ x_k Gx[k] + Σ u_a Gu[a] + Σ v_b Gv[b]) e`.
/// Empty arrays mean zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineParams {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub b0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bx: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bu: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bv: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub buv: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub s0: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sx: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub su: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sv: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub g0: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gx: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gu: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gv: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub driver: DriverParams,
    #[serde(default)]
    pub terminal: TerminalParams,
    #[serde(default)]
    pub jump_weight: JumpWeightParams,
}

/// Dense, dimension-checked form of [`AffineParams`].
#[derive(Debug, Clone)]
pub struct AffineCoefficients {
    dims: Dims,
    p: usize,
    q: usize,
    b0: Vec<f64>,
    bx: Vec<f64>,
    bu: Vec<f64>,
    bv: Vec<f64>,
    buv: Vec<f64>,
    s0: Vec<f64>,
    sx: Vec<Vec<f64>>,
    su: Vec<Vec<f64>>,
    sv: Vec<Vec<f64>>,
    g0: Vec<f64>,
    gx: Vec<Vec<f64>>,
    gu: Vec<Vec<f64>>,
    gv: Vec<Vec<f64>>,
    driver: DriverParams,
    terminal: TerminalParams,
    jump_weight: JumpWeightParams,
    rho_scale: f64,
}

fn vector(name: &str, v: &[f64], len: usize) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(vec![0.0; len]);
    }
    if v.len() != len {
        return Err(Error::Dimension(format!(
            "{name}: expected length {len}, got {}",
            v.len()
        )));
    }
    Ok(v.to_vec())
}

fn matrix(name: &str, m: &[Vec<f64>], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Ok(vec![0.0; rows * cols]);
    }
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(Error::Dimension(format!(
            "{name}: expected a {rows}x{cols} matrix"
        )));
    }
    Ok(m.iter().flatten().copied().collect())
}

fn matrices(name: &str, m: &[Vec<Vec<f64>>], count: usize, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    if m.len() != count {
        return Err(Error::Dimension(format!(
            "{name}: expected {count} matrices, got {}",
            m.len()
        )));
    }
    m.iter()
        .enumerate()
        .map(|(i, mi)| matrix(&format!("{name}[{i}]"), mi, rows, cols))
        .collect()
}

impl AffineCoefficients {
    pub fn new(params: &AffineParams, dims: Dims, p: usize, q: usize, rho_scale: f64) -> Result<Self> {
        let Dims {
            state: n,
            brownian: d,
            mark: l,
        } = dims;
        let dr = &params.driver;
        let driver = DriverParams {
            c0: dr.c0,
            cx: vector("driver.cx", &dr.cx, n)?,
            cy: dr.cy,
            cz: vector("driver.cz", &dr.cz, d)?,
            ck: dr.ck,
            cu: vector("driver.cu", &dr.cu, p)?,
            cv: vector("driver.cv", &dr.cv, q)?,
            cuv: dr.cuv,
        };
        let tp = &params.terminal;
        let mut terminal = tp.clone();
        terminal.linear = vector("terminal.linear", &tp.linear, n)?;
        if let Some(a) = &mut terminal.abs {
            a.center = vector("terminal.abs.center", &a.center, n)?;
        }
        if let Some(a) = &mut terminal.smooth_abs {
            a.center = vector("terminal.smooth_abs.center", &a.center, n)?;
        }
        if !params.buv.is_empty() && p != q {
            return Err(Error::Dimension(
                "buv requires control dimensions of U and V to agree".into(),
            ));
        }
        if driver.cuv != 0.0 && p != q {
            return Err(Error::Dimension(
                "driver.cuv requires control dimensions of U and V to agree".into(),
            ));
        }
        Ok(Self {
            dims,
            p,
            q,
            b0: vector("b0", &params.b0, n)?,
            bx: matrix("bx", &params.bx, n, n)?,
            bu: matrix("bu", &params.bu, n, p)?,
            bv: matrix("bv", &params.bv, n, q)?,
            buv: vector("buv", &params.buv, n)?,
            s0: matrix("s0", &params.s0, n, d)?,
            sx: matrices("sx", &params.sx, n, n, d)?,
            su: matrices("su", &params.su, p, n, d)?,
            sv: matrices("sv", &params.sv, q, n, d)?,
            g0: matrix("g0", &params.g0, n, l)?,
            gx: matrices("gx", &params.gx, n, n, l)?,
            gu: matrices("gu", &params.gu, p, n, l)?,
            gv: matrices("gv", &params.gv, q, n, l)?,
            driver,
            terminal,
            jump_weight: params.jump_weight.clone(),
            rho_scale,
        })
    }

    fn combine(base: &[f64], x: &[f64], per_x: &[Vec<f64>], u: &[f64], per_u: &[Vec<f64>], v: &[f64], per_v: &[Vec<f64>], out: &mut [f64]) {
        out.copy_from_slice(base);
        for (m, c) in per_x.iter().zip(x) {
            for (o, a) in out.iter_mut().zip(m) {
                *o += c * a;
            }
        }
        for (m, c) in per_u.iter().zip(u) {
            for (o, a) in out.iter_mut().zip(m) {
                *o += c * a;
            }
        }
        for (m, c) in per_v.iter().zip(v) {
            for (o, a) in out.iter_mut().zip(m) {
                *o += c * a;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GameCoefficients for AffineCoefficients {
    fn drift(&self, _t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.dims.state;
        let uv = if self.p == self.q { dot(u, v) } else { 0.0 };
        for i in 0..n {
            out[i] = self.b0[i]
                + dot(&self.bx[i * n..(i + 1) * n], x)
                + dot(&self.bu[i * self.p..(i + 1) * self.p], u)
                + dot(&self.bv[i * self.q..(i + 1) * self.q], v)
                + self.buv[i] * uv;
        }
    }

    fn diffusion(&self, _t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        Self::combine(&self.s0, x, &self.sx, u, &self.su, v, &self.sv, out);
    }

    fn jump(&self, _t: f64, x: &[f64], u: &[f64], v: &[f64], e: &[f64], out: &mut [f64]) {
        let n = self.dims.state;
        let l = self.dims.mark;
        let mut g = vec![0.0; n * l];
        Self::combine(&self.g0, x, &self.gx, u, &self.gu, v, &self.gv, &mut g);
        for i in 0..n {
            out[i] = dot(&g[i * l..(i + 1) * l], e);
        }
    }

    fn driver(&self, _t: f64, x: &[f64], y: f64, z: &[f64], k: f64, u: &[f64], v: &[f64]) -> f64 {
        let d = &self.driver;
        let mut f = d.c0 + dot(&d.cx, x) + d.cy * y + dot(&d.cz, z) + d.ck * k;
        f += dot(&d.cu, u) + dot(&d.cv, v);
        if d.cuv != 0.0 {
            f += d.cuv * dot(u, v);
        }
        f
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        let tp = &self.terminal;
        let mut phi = tp.constant + dot(&tp.linear, x);
        if tp.quadratic != 0.0 {
            phi += tp.quadratic * dot(x, x);
        }
        if let Some(a) = &tp.abs {
            let r: f64 = x.iter().zip(&a.center).map(|(xi, c)| (xi - c).powi(2)).sum();
            phi += a.weight * r.sqrt();
        }
        if let Some(a) = &tp.smooth_abs {
            let r: f64 = x.iter().zip(&a.center).map(|(xi, c)| (xi - c).powi(2)).sum();
            phi += a.weight * (a.width * a.width + r).sqrt();
        }
        if let Some(s) = &tp.sin {
            phi += s.amp * x.iter().map(|xi| (s.freq * xi).sin()).sum::<f64>();
        }
        phi
    }

    fn jump_weight(&self, x: &[f64], e: &[f64]) -> f64 {
        let jw = &self.jump_weight;
        let s = ((1.0 + x[0]) / 2.0).clamp(0.0, 1.0);
        mark_norm(e).min(1.0) * (jw.l0 + jw.lx * s)
    }

    fn rho(&self, e: &[f64]) -> f64 {
        self.rho_scale * mark_norm(e)
    }
}

// ---------------------------------------------------------------------------
// Closure-backed coefficients (tests and embedding; not serializable)
// ---------------------------------------------------------------------------

type VecFn = Box<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
type JumpFn = Box<dyn Fn(f64, &[f64], &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
type DriverFn = Box<dyn Fn(f64, &[f64], f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync>;
type TerminalFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type MarkFn = Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type RhoFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Coefficients given as closures. Unset entries default to zero.
pub struct CustomCoefficients {
    pub drift: VecFn,
    pub diffusion: VecFn,
    pub jump: JumpFn,
    pub driver: DriverFn,
    pub terminal: TerminalFn,
    pub jump_weight: MarkFn,
    pub rho: RhoFn,
}

impl Default for CustomCoefficients {
    fn default() -> Self {
        Self {
            drift: Box::new(|_, _, _, _, out| out.fill(0.0)),
            diffusion: Box::new(|_, _, _, _, out| out.fill(0.0)),
            jump: Box::new(|_, _, _, _, _, out| out.fill(0.0)),
            driver: Box::new(|_, _, _, _, _, _, _| 0.0),
            terminal: Box::new(|_| 0.0),
            jump_weight: Box::new(|_, _| 0.0),
            rho: Box::new(mark_norm),
        }
    }
}

impl CustomCoefficients {
    pub fn with_drift(mut self, f: impl Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Box::new(f);
        self
    }
    pub fn with_diffusion(mut self, f: impl Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Box::new(f);
        self
    }
    pub fn with_jump(mut self, f: impl Fn(f64, &[f64], &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.jump = Box::new(f);
        self
    }
    pub fn with_driver(mut self, f: impl Fn(f64, &[f64], f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.driver = Box::new(f);
        self
    }
    pub fn with_terminal(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Box::new(f);
        self
    }
    pub fn with_jump_weight(mut self, f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.jump_weight = Box::new(f);
        self
    }
    pub fn with_rho(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.rho = Box::new(f);
        self
    }
}

impl GameCoefficients for CustomCoefficients {
    fn drift(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, u, v, out)
    }
    fn diffusion(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, u, v, out)
    }
    fn jump(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], e: &[f64], out: &mut [f64]) {
        (self.jump)(t, x, u, v, e, out)
    }
    fn driver(&self, t: f64, x: &[f64], y: f64, z: &[f64], k: f64, u: &[f64], v: &[f64]) -> f64 {
        (self.driver)(t, x, y, z, k, u, v)
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }
    fn jump_weight(&self, x: &[f64], e: &[f64]) -> f64 {
        (self.jump_weight)(x, e)
    }
    fn rho(&self, e: &[f64]) -> f64 {
        (self.rho)(e)
    }
}

// ---------------------------------------------------------------------------
// Families and named scenarios
// ---------------------------------------------------------------------------

fn default_sigma() -> f64 {
    0.3
}
fn default_jump_scale() -> f64 {
    0.2
}

/// Serializable coefficient families. Named scenarios expand to
/// [`AffineParams`] for one-dimensional state, noise and marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum CoefficientFamily {
    Affine(AffineParams),
    ZeroDynamics {},
    SeparatedDrift {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_jump_scale")]
        jump_scale: f64,
    },
    BilinearGap {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_jump_scale")]
        jump_scale: f64,
    },
    JumpHeavy {
        sigma: f64,
        jump_scale: f64,
        driver_k: f64,
        jump_weight: f64,
    },
    DriverCoupled {
        sigma: f64,
        jump_scale: f64,
        mean_reversion: f64,
        driver: DriverParams,
        jump_weight: f64,
    },
}

fn scalar_affine() -> AffineParams {
    AffineParams::default()
}

impl CoefficientFamily {
    pub fn name(&self) -> &'static str {
        match self {
            CoefficientFamily::Affine(_) => "affine",
            CoefficientFamily::ZeroDynamics {} => "zero_dynamics",
            CoefficientFamily::SeparatedDrift { .. } => "separated_drift",
            CoefficientFamily::BilinearGap { .. } => "bilinear_gap",
            CoefficientFamily::JumpHeavy { .. } => "jump_heavy",
            CoefficientFamily::DriverCoupled { .. } => "driver_coupled",
        }
    }

    /// Expands the family to affine parameters.
    pub fn to_affine(&self, dims: Dims) -> Result<AffineParams> {
        let scalar = dims
            == Dims {
                state: 1,
                brownian: 1,
                mark: 1,
            };
        if !matches!(self, CoefficientFamily::Affine(_)) && !scalar {
            return Err(Error::Config(format!(
                "family {} requires dims state=brownian=mark=1",
                self.name()
            )));
        }
        let mut a = scalar_affine();
        match self {
            CoefficientFamily::Affine(p) => return Ok(p.clone()),
            CoefficientFamily::ZeroDynamics {} => {
                a.terminal.linear = vec![1.0];
            }
            CoefficientFamily::SeparatedDrift { sigma, jump_scale } => {
                a.bu = vec![vec![1.0]];
                a.bv = vec![vec![-1.0]];
                a.s0 = vec![vec![*sigma]];
                a.g0 = vec![vec![*jump_scale]];
                a.terminal.linear = vec![1.0];
            }
            CoefficientFamily::BilinearGap { sigma, jump_scale } => {
                a.buv = vec![1.0];
                a.s0 = vec![vec![*sigma]];
                a.g0 = vec![vec![*jump_scale]];
                a.terminal.sin = Some(SinTerm { amp: 1.0, freq: 1.0 });
            }
            CoefficientFamily::JumpHeavy {
                sigma,
                jump_scale,
                driver_k,
                jump_weight,
            } => {
                a.bu = vec![vec![1.0]];
                a.bv = vec![vec![-1.0]];
                a.s0 = vec![vec![*sigma]];
                a.g0 = vec![vec![*jump_scale]];
                a.driver.ck = *driver_k;
                a.jump_weight.l0 = *jump_weight;
                a.terminal.smooth_abs = Some(SmoothAbsTerm {
                    weight: 1.0,
                    center: vec![0.0],
                    width: 1.0,
                });
            }
            CoefficientFamily::DriverCoupled {
                sigma,
                jump_scale,
                mean_reversion,
                driver,
                jump_weight,
            } => {
                a.bx = vec![vec![-*mean_reversion]];
                a.bu = vec![vec![0.5]];
                a.bv = vec![vec![-0.5]];
                a.s0 = vec![vec![*sigma]];
                a.g0 = vec![vec![*jump_scale]];
                a.driver = driver.clone();
                a.jump_weight.l0 = *jump_weight;
                a.terminal.abs = Some(AbsTerm {
                    weight: 1.0,
                    center: vec![0.0],
                });
            }
        }
        Ok(a)
    }
}

// ---------------------------------------------------------------------------
// Problem specification and document format
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct ProblemSpec {
    pub dims: Dims,
    pub horizon: f64,
    pub coefficients: Arc<dyn GameCoefficients>,
    /// `None` for closure-backed coefficients.
    pub family: Option<CoefficientFamily>,
    pub lipschitz_c: f64,
    pub rho_scale: f64,
    pub u_set: ControlSet,
    pub v_set: ControlSet,
    pub levy: LevyMeasure,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("dims", &self.dims)
            .field("horizon", &self.horizon)
            .field("family", &self.family.as_ref().map(|c| c.name()))
            .field("lipschitz_c", &self.lipschitz_c)
            .field("u_set", &self.u_set)
            .field("v_set", &self.v_set)
            .field("levy", &self.levy)
            .finish()
    }
}

impl ProblemSpec {
    /// Builds a spec from a serializable family.
    pub fn from_family(
        family: CoefficientFamily,
        dims: Dims,
        horizon: f64,
        lipschitz_c: f64,
        rho_scale: f64,
        u_set: ControlSet,
        v_set: ControlSet,
        levy: LevyMeasure,
    ) -> Result<Self> {
        let affine = family.to_affine(dims)?;
        let coeffs = AffineCoefficients::new(&affine, dims, u_set.dim(), v_set.dim(), rho_scale)?;
        let spec = Self {
            dims,
            horizon,
            coefficients: Arc::new(coeffs),
            family: Some(family),
            lipschitz_c,
            rho_scale,
            u_set,
            v_set,
            levy,
        };
        spec.check_consistency()?;
        Ok(spec)
    }

    /// Builds a spec around in-process coefficient closures.
    pub fn from_coefficients(
        coefficients: Arc<dyn GameCoefficients>,
        dims: Dims,
        horizon: f64,
        lipschitz_c: f64,
        u_set: ControlSet,
        v_set: ControlSet,
        levy: LevyMeasure,
    ) -> Result<Self> {
        let spec = Self {
            dims,
            horizon,
            coefficients,
            family: None,
            lipschitz_c,
            rho_scale: 0.0,
            u_set,
            v_set,
            levy,
        };
        spec.check_consistency()?;
        Ok(spec)
    }

    pub fn check_consistency(&self) -> Result<()> {
        if self.dims.state == 0 || self.dims.brownian == 0 || self.dims.mark == 0 {
            return Err(Error::Dimension("all dimensions must be >= 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.lipschitz_c > 0.0 && self.lipschitz_c.is_finite()) {
            return Err(Error::Config("lipschitz_c must be positive".into()));
        }
        self.levy.validate()?;
        if let Some(l) = self.levy.mark_dim() {
            if l != self.dims.mark {
                return Err(Error::Dimension(format!(
                    "levy marks have dimension {l}, dims.mark = {}",
                    self.dims.mark
                )));
            }
        }
        if self.u_set.is_empty() || self.v_set.is_empty() {
            return Err(Error::Config("empty control set".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.dims.state
    }

    pub fn d(&self) -> usize {
        self.dims.brownian
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        self.coefficients.terminal(x)
    }

    /// Returns a copy with a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Self {
        let mut s = self.clone();
        s.horizon = horizon;
        s
    }

    pub fn to_document(&self) -> Result<ProblemDocument> {
        let family = self.family.clone().ok_or_else(|| {
            Error::Config("closure-backed coefficients cannot be serialized".into())
        })?;
        Ok(ProblemDocument {
            schema_version: SCHEMA_VERSION,
            dims: self.dims,
            horizon: self.horizon,
            coefficients: CoefficientsDocument {
                family,
                lipschitz_c: self.lipschitz_c,
                rho_scale: self.rho_scale,
            },
            controls: ControlsDocument {
                u: self.u_set.points.clone(),
                v: self.v_set.points.clone(),
            },
            levy: self.levy.clone(),
        })
    }

    pub fn from_document(doc: &ProblemDocument) -> Result<Self> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse {
                pointer: "/schema_version".into(),
                message: format!("unsupported schema version {}", doc.schema_version),
            });
        }
        Self::from_family(
            doc.coefficients.family.clone(),
            doc.dims,
            doc.horizon,
            doc.coefficients.lipschitz_c,
            doc.coefficients.rho_scale,
            ControlSet::new("U", doc.controls.u.clone())?,
            ControlSet::new("V", doc.controls.v.clone())?,
            doc.levy.clone(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document()?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientsDocument {
    #[serde(flatten)]
    pub family: CoefficientFamily,
    pub lipschitz_c: f64,
    #[serde(default)]
    pub rho_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsDocument {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// On-disk problem file, schema version 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemDocument {
    pub schema_version: u32,
    pub dims: Dims,
    pub horizon: f64,
    pub coefficients: CoefficientsDocument,
    pub controls: ControlsDocument,
    pub levy: LevyMeasure,
}

pub(crate) fn to_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{key}")),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => {}
        }
    }
    if out.is_empty() {
        "/".into()
    } else {
        out
    }
}

/// Parses a problem document from JSON text.
pub fn parse_problem_str(text: &str) -> Result<ProblemSpec> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        pointer: "/".into(),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        pointer: "/".into(),
        message: "problem file must be a JSON object".into(),
    })?;
    for key in ["schema_version", "dims", "horizon", "coefficients", "controls", "levy"] {
        if !obj.contains_key(key) {
            return Err(Error::Parse {
                pointer: format!("/{key}"),
                message: format!("missing required key \"{key}\""),
            });
        }
    }
    if let Some(coeffs) = obj["coefficients"].as_object() {
        if let Some(name) = coeffs.get("family").and_then(Value::as_str) {
            const KNOWN: [&str; 6] = [
                "affine",
                "zero_dynamics",
                "separated_drift",
                "bilinear_gap",
                "jump_heavy",
                "driver_coupled",
            ];
            if !KNOWN.contains(&name) {
                return Err(Error::Config(format!("unknown coefficient family \"{name}\"")));
            }
        }
    }
    let doc: ProblemDocument = serde_path_to_error::deserialize(&value).map_err(|e| {
        let pointer = to_pointer(e.path());
        Error::Parse {
            pointer,
            message: e.inner().to_string(),
        }
    })?;
    ProblemSpec::from_document(&doc)
}

/// Reads and parses a problem file.
pub fn parse_problem(path: impl AsRef<Path>) -> Result<ProblemSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_problem_str(&text)
}

// ---------------------------------------------------------------------------
// Scenario registry
// ---------------------------------------------------------------------------

pub const SCENARIOS: [&str; 5] = [
    "zero_dynamics",
    "separated_drift",
    "bilinear_gap",
    "jump_heavy",
    "driver_coupled",
];

fn scalar_dims() -> Dims {
    Dims {
        state: 1,
        brownian: 1,
        mark: 1,
    }
}

fn atoms(list: &[(f64, f64)]) -> Result<LevyMeasure> {
    LevyMeasure::new(
        list.iter()
            .map(|&(mark, rate)| Atom {
                mark: vec![mark],
                rate,
            })
            .collect(),
    )
}

/// Built-in scenarios spanning the hypothesis space.
pub fn scenario(name: &str) -> Result<ProblemSpec> {
    let five = [-1.0, -0.5, 0.0, 0.5, 1.0];
    match name {
        "zero_dynamics" => ProblemSpec::from_family(
            CoefficientFamily::ZeroDynamics {},
            scalar_dims(),
            1.0,
            1.0,
            0.0,
            ControlSet::scalar("U", &[-1.0, 0.0, 1.0])?,
            ControlSet::scalar("V", &[-1.0, 0.0, 1.0])?,
            atoms(&[(1.0, 1.0)])?,
        ),
        "separated_drift" => ProblemSpec::from_family(
            CoefficientFamily::SeparatedDrift {
                sigma: 0.3,
                jump_scale: 0.2,
            },
            scalar_dims(),
            1.0,
            1.0,
            0.2,
            ControlSet::scalar("U", &five)?,
            ControlSet::scalar("V", &five)?,
            atoms(&[(1.0, 1.0), (-0.5, 0.5)])?,
        ),
        "bilinear_gap" => ProblemSpec::from_family(
            CoefficientFamily::BilinearGap {
                sigma: 0.3,
                jump_scale: 0.2,
            },
            scalar_dims(),
            1.0,
            1.0,
            0.2,
            ControlSet::scalar("U", &[-1.0, 1.0])?,
            ControlSet::scalar("V", &[-1.0, 1.0])?,
            atoms(&[(1.0, 1.0)])?,
        ),
        "jump_heavy" => ProblemSpec::from_family(
            CoefficientFamily::JumpHeavy {
                sigma: 0.2,
                jump_scale: 0.5,
                driver_k: 0.5,
                jump_weight: 0.5,
            },
            scalar_dims(),
            1.0,
            1.0,
            0.5,
            ControlSet::scalar("U", &[-0.5, 0.0, 0.5])?,
            ControlSet::scalar("V", &[-0.5, 0.0, 0.5])?,
            atoms(&[(1.0, 1.5), (-1.0, 1.5)])?,
        ),
        "driver_coupled" => ProblemSpec::from_family(
            CoefficientFamily::DriverCoupled {
                sigma: 0.4,
                jump_scale: 0.3,
                mean_reversion: 0.2,
                driver: DriverParams {
                    cx: vec![0.1],
                    cy: -0.5,
                    cz: vec![0.3],
                    ck: 0.5,
                    cu: vec![0.2],
                    cv: vec![-0.2],
                    ..DriverParams::default()
                },
                jump_weight: 0.8,
            },
            scalar_dims(),
            1.0,
            1.0,
            0.3,
            ControlSet::scalar("U", &[-1.0, 0.0, 1.0])?,
            ControlSet::scalar("V", &[-1.0, 0.0, 1.0])?,
            atoms(&[(1.0, 1.0)])?,
        ),
        other => Err(Error::Config(format!("unknown scenario \"{other}\""))),
    }
}

// ---------------------------------------------------------------------------
// Hypothesis probing
// ---------------------------------------------------------------------------

/// Sampling configuration for [`validate_hypotheses`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub n_probes: usize,
    /// Probes use `|x_i| <= x_box`.
    pub x_box: f64,
    pub y_box: f64,
    pub z_box: f64,
    pub k_box: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_probes: 2000,
            x_box: 5.0,
            y_box: 5.0,
            z_box: 5.0,
            k_box: 5.0,
            seed: 17,
        }
    }
}

/// Outcome of probing one hypothesis clause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseCheck {
    pub clause: String,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
    pub witness: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub clauses: Vec<ClauseCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&ClauseCheck> {
        self.clauses.iter().filter(|c| !c.passed).collect()
    }

    pub fn clause(&self, name: &str) -> Option<&ClauseCheck> {
        self.clauses.iter().find(|c| c.clause == name)
    }
}

struct MaxTracker {
    clause: &'static str,
    value: f64,
    witness: String,
}

impl MaxTracker {
    fn new(clause: &'static str) -> Self {
        Self {
            clause,
            value: 0.0,
            witness: String::new(),
        }
    }

    fn offer(&mut self, value: f64, witness: impl FnOnce() -> String) {
        let v = if value.is_nan() { f64::INFINITY } else { value };
        if v > self.value {
            self.value = v;
            self.witness = witness();
        }
    }

    fn finish(self, threshold: f64) -> ClauseCheck {
        ClauseCheck {
            clause: self.clause.to_string(),
            statistic: self.value,
            threshold,
            passed: self.value <= threshold * (1.0 + 1e-9) + 1e-12,
            witness: self.witness,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Probes the Lipschitz, growth and monotonicity clauses against the
/// declared constant. Violations are reported, never thrown.
pub fn validate_hypotheses(spec: &ProblemSpec, probe: &ProbeConfig) -> ValidationReport {
    let c = spec.lipschitz_c;
    let n = spec.n();
    let d = spec.d();
    let co = spec.coefficients.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let uniform = |rng: &mut ChaCha8Rng, r: f64, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-r..=r)).collect()
    };

    let mut b_lip = MaxTracker::new("b,sigma Lipschitz in x");
    let mut g_lip = MaxTracker::new("gamma Lipschitz ratio to rho");
    let mut g_zero = MaxTracker::new("|gamma(t,0)| / rho");
    let mut t_cont = MaxTracker::new("continuity in t");
    let mut f_lip = MaxTracker::new("f Lipschitz in (x,y,z,k)");
    let mut f_mono = MaxTracker::new("f nondecreasing in k");
    let mut l_bound = MaxTracker::new("l <= C(1 ^ |e|)");
    let mut l_neg = MaxTracker::new("l >= 0");
    let mut l_lip = MaxTracker::new("l Lipschitz in x");
    let mut phi_lip = MaxTracker::new("Phi Lipschitz");
    let mut finite = MaxTracker::new("coefficients finite");

    let mut b1 = vec![0.0; n];
    let mut b2 = vec![0.0; n];
    let mut s1 = vec![0.0; n * d];
    let mut s2 = vec![0.0; n * d];
    let mut g1 = vec![0.0; n];
    let mut g2 = vec![0.0; n];

    let nu = spec.u_set.len();
    let nv = spec.v_set.len();
    let horizon = spec.horizon;
    for i in 0..probe.n_probes {
        // Alternate far pairs, near pairs and near-corner pairs.
        let x = match i % 3 {
            2 => (0..n)
                .map(|_| {
                    let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    s * probe.x_box * (1.0 - 1e-3 * rng.random::<f64>())
                })
                .collect(),
            _ => uniform(&mut rng, probe.x_box, n),
        };
        let xp: Vec<f64> = if i % 3 == 0 {
            uniform(&mut rng, probe.x_box, n)
        } else {
            x.iter()
                .map(|xi| (xi + 1e-3 * probe.x_box * rng.random_range(-1.0..=1.0)).clamp(-probe.x_box, probe.x_box))
                .collect()
        };
        let dx = diff_norm(&x, &xp);
        let t = rng.random_range(0.0..=horizon);
        let u = spec.u_set.point(rng.random_range(0..nu));
        let v = spec.v_set.point(rng.random_range(0..nv));

        co.drift(t, &x, u, v, &mut b1);
        co.drift(t, &xp, u, v, &mut b2);
        co.diffusion(t, &x, u, v, &mut s1);
        co.diffusion(t, &xp, u, v, &mut s2);
        if b1.iter().chain(&s1).any(|a| !a.is_finite()) {
            finite.offer(f64::INFINITY, || format!("b or sigma non-finite at t={t}, x={x:?}"));
        }
        if dx > 0.0 {
            let ratio = (diff_norm(&b1, &b2) + diff_norm(&s1, &s2)) / dx;
            b_lip.offer(ratio, || format!("x={x:?}, x'={xp:?}, u={u:?}, v={v:?}"));
        }

        // Continuity in t probed with a small step.
        let h = 1e-7 * horizon.max(1.0);
        let t2 = if t + h <= horizon { t + h } else { t - h };
        co.drift(t2, &x, u, v, &mut b2);
        co.diffusion(t2, &x, u, v, &mut s2);
        t_cont.offer(diff_norm(&b1, &b2) + diff_norm(&s1, &s2), || format!("t={t}, x={x:?}"));

        for atom in &spec.levy.atoms {
            let e = &atom.mark;
            let rho = co.rho(e);
            co.jump(t, &x, u, v, e, &mut g1);
            co.jump(t, &xp, u, v, e, &mut g2);
            let gd = diff_norm(&g1, &g2);
            if dx > 0.0 {
                let ratio = if rho > 0.0 {
                    gd / (rho * dx)
                } else if gd > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                g_lip.offer(ratio, || format!("e={e:?}, x={x:?}, x'={xp:?}"));
            }
            let zero = vec![0.0; n];
            co.jump(t, &zero, u, v, e, &mut g1);
            let g0 = norm(&g1);
            let ratio = if rho > 0.0 {
                g0 / rho
            } else if g0 > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            g_zero.offer(ratio, || format!("e={e:?}, u={u:?}, v={v:?}"));

            let cap = mark_norm(e).min(1.0);
            let lx = co.jump_weight(&x, e);
            let lxp = co.jump_weight(&xp, e);
            l_bound.offer(lx / cap, || format!("x={x:?}, e={e:?}, l={lx}"));
            l_neg.offer(-lx, || format!("x={x:?}, e={e:?}, l={lx}"));
            if dx > 0.0 {
                l_lip.offer((lx - lxp).abs() / (dx * cap), || format!("x={x:?}, x'={xp:?}, e={e:?}"));
            }
        }

        let y = rng.random_range(-probe.y_box..=probe.y_box);
        let z = uniform(&mut rng, probe.z_box, d);
        let k = rng.random_range(-probe.k_box..=probe.k_box);
        let (yp, zp, kp) = if i % 2 == 0 {
            (
                rng.random_range(-probe.y_box..=probe.y_box),
                uniform(&mut rng, probe.z_box, d),
                rng.random_range(-probe.k_box..=probe.k_box),
            )
        } else {
            (
                y + 1e-3 * rng.random_range(-1.0..=1.0),
                z.iter().map(|zi| zi + 1e-3 * rng.random_range(-1.0..=1.0)).collect(),
                k + 1e-3 * rng.random_range(-1.0..=1.0),
            )
        };
        let f1 = co.driver(t, &x, y, &z, k, u, v);
        let f2 = co.driver(t, &xp, yp, &zp, kp, u, v);
        if !f1.is_finite() {
            finite.offer(f64::INFINITY, || format!("f non-finite at x={x:?}, y={y}"));
        }
        let denom = dx + (y - yp).abs() + diff_norm(&z, &zp) + (k - kp).abs();
        if denom > 0.0 {
            f_lip.offer((f1 - f2).abs() / denom, || {
                format!("(x,y,z,k)=({x:?},{y},{z:?},{k}) vs ({xp:?},{yp},{zp:?},{kp})")
            });
        }
        let (klo, khi) = if k <= kp { (k, kp) } else { (kp, k) };
        if khi > klo {
            let lo = co.driver(t, &x, y, &z, klo, u, v);
            let hi = co.driver(t, &x, y, &z, khi, u, v);
            f_mono.offer(lo - hi, || format!("f(k={klo})={lo} > f(k={khi})={hi} at x={x:?}"));
        }

        let p1 = co.terminal(&x);
        let p2 = co.terminal(&xp);
        if !p1.is_finite() {
            finite.offer(f64::INFINITY, || format!("Phi non-finite at x={x:?}"));
        }
        if dx > 0.0 {
            phi_lip.offer((p1 - p2).abs() / dx, || format!("x={x:?}, x'={xp:?}"));
        }
    }

    let mut rho_bound = MaxTracker::new("rho <= C(1 ^ |e|)");
    for atom in &spec.levy.atoms {
        let e = &atom.mark;
        rho_bound.offer(co.rho(e) / mark_norm(e).min(1.0), || format!("e={e:?}"));
    }

    ValidationReport {
        clauses: vec![
            t_cont.finish(1e-3),
            b_lip.finish(c),
            g_lip.finish(1.0),
            g_zero.finish(1.0),
            f_lip.finish(c),
            f_mono.finish(0.0),
            l_bound.finish(c),
            l_neg.finish(0.0),
            l_lip.finish(c),
            phi_lip.finish(c),
            rho_bound.finish(c),
            finite.finish(0.0),
        ],
    }
}
