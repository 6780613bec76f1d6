//! The property suite run by `sdgj verify`, its manifest, and the plain-text
//! report rendered from a manifest.
//!
//! The manifest splits into `metadata` (timestamp, version) and `payload`
//! (everything measured). The payload is a pure function of the problem and
//! the configuration, seed included.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bsde::{
    comparison_check, markov_identity_check, stability_beta_threshold, stability_check, ComparisonProbe, Engine,
    History, WithDriver,
};
use crate::error::{Error, Result};
use crate::forward::{ConstantPolicy, FeedbackPolicy};
use crate::game::{decreasing, determinism_check, dpp_check, dpp_ladder, regularity_check, solve_value, DeterminismSetup, LADDER_FLOOR};
use crate::grid::{GridField, StateGrid};
use crate::levy_paths::TimeGrid;
use crate::oracle::{tree_node_count, OutcomeTree, TreeParams, Which, MAX_TREE_GAUSS};
use crate::pide::{
    consistency_check, cross_rung, isaacs_gap, monotonicity_check, solve_pide, cfl_steps, CrossRung, PideScheme,
};
use crate::problem::{validate_hypotheses, ProbeConfig, ProblemSpec};
use crate::step::MAX_JUMP_MASS;

/// Resolution and sample sizes of one `verify` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Time steps of the coarsest grid-mode game solve.
    pub steps: usize,
    /// Nodes per axis of the coarsest grid-mode game solve.
    pub xnodes: usize,
    /// Half width of the state box.
    pub xbox: f64,
    pub gauss: usize,
    pub cfl: f64,
    /// Spacing of the first cross-solver rung; the second halves it.
    pub cross_dx: f64,
    pub comparison_pairs: usize,
    pub stability_trials: usize,
    /// Paths per pre-`t` history in the determinism check.
    pub determinism_paths: usize,
    pub monotone_pairs: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            steps: 16,
            xnodes: 25,
            xbox: 3.0,
            gauss: crate::bsde::DEFAULT_GAUSS,
            cfl: crate::pide::DEFAULT_CFL,
            cross_dx: 0.05,
            comparison_pairs: 200,
            stability_trials: 100,
            determinism_paths: 10_000,
            monotone_pairs: 100,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 || self.xnodes < 3 || !(self.xbox > 1.0) || self.gauss == 0 {
            return Err(Error::Config(
                "verify needs steps >= 2, xnodes >= 3, xbox > 1 and gauss >= 1".into(),
            ));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::Config(format!("CFL target {} outside (0, 1]", self.cfl)));
        }
        if !(self.cross_dx > 0.0) || self.determinism_paths < 2 {
            return Err(Error::Config("cross_dx must be positive and determinism paths >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<")]
    Below,
}

impl Relation {
    fn symbol(self) -> &'static str {
        match self {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
            Relation::Below => "<",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    /// The result the check exercises.
    pub reference: String,
    pub relation: Relation,
    /// `None` when the statistic is undefined (see the witness).
    pub statistic: Option<f64>,
    pub threshold: f64,
    pub passed: bool,
    /// Set when the check's precondition does not hold for this problem.
    pub skipped: bool,
    pub witness: serde_json::Value,
}

impl CheckRecord {
    fn new(name: &str, reference: &str, relation: Relation, statistic: Option<f64>, threshold: f64) -> Self {
        let passed = match (statistic, relation) {
            (Some(s), Relation::AtMost) => s <= threshold,
            (Some(s), Relation::AtLeast) => s >= threshold,
            (Some(s), Relation::Below) => s < threshold,
            (None, _) => false,
        };
        Self {
            name: name.into(),
            reference: reference.into(),
            relation,
            statistic,
            threshold,
            passed,
            skipped: false,
            witness: serde_json::Value::Null,
        }
    }

    fn with(mut self, witness: serde_json::Value) -> Self {
        self.witness = witness;
        self
    }

    fn passing(mut self, passed: bool) -> Self {
        self.passed = passed;
        self
    }

    fn skip(name: &str, reference: &str, why: String) -> Self {
        Self {
            name: name.into(),
            reference: reference.into(),
            relation: Relation::AtMost,
            statistic: None,
            threshold: 0.0,
            passed: true,
            skipped: true,
            witness: json!({ "skipped": why }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub scenario: String,
    pub seed: u64,
    pub config: VerifyConfig,
    pub checks: Vec<CheckRecord>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub metadata: Metadata,
    pub payload: Payload,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Canonical serialization of the payload alone.
    pub fn payload_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.payload)?)
    }
}

/// Parses a manifest, naming the offending JSON pointer on failure.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let parse_err = |pointer: String, message: String| Error::Parse { pointer, message };
    if text.trim().is_empty() {
        return Err(parse_err("/".into(), "empty manifest".into()));
    }
    let mut de = serde_json::Deserializer::from_str(text);
    let manifest: Manifest = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let mut pointer = crate::problem::to_pointer(e.path());
        let message = e.inner().to_string();
        if let Some(field) = message.strip_prefix("missing field `").and_then(|m| m.split('`').next()) {
            pointer = format!("{}/{field}", pointer.trim_end_matches('/'));
        }
        parse_err(pointer, message)
    })?;
    if manifest.payload.checks.is_empty() {
        return Err(parse_err("/payload/checks".into(), "manifest lists no checks".into()));
    }
    Ok(manifest)
}

fn fmt_num(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.3e}"),
        None => "-".into(),
    }
}

/// Plain-text table of a manifest: one row per check, `FAIL` rows followed
/// by their witness.
pub fn report_render(text: &str) -> Result<String> {
    let m = parse_manifest(text)?;
    let p = &m.payload;
    let name_w = p.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
    let ref_w = p.checks.iter().map(|c| c.reference.len()).max().unwrap_or(9).max(9);
    let mut out = format!(
        "scenario {} (seed {}, sdgj {})\n\n{:<name_w$}  {:<ref_w$}  {:>10}     {:>10}  result\n",
        p.scenario, p.seed, m.metadata.version, "check", "reference", "statistic", "threshold"
    );
    let mut fails = 0;
    for c in &p.checks {
        let result = if c.skipped {
            "SKIP"
        } else if c.passed {
            "pass"
        } else {
            fails += 1;
            "FAIL"
        };
        out += &format!(
            "{:<name_w$}  {:<ref_w$}  {:>10}  {:<2} {:>10}  {result}\n",
            c.name,
            c.reference,
            fmt_num(c.statistic),
            c.relation.symbol(),
            fmt_num(Some(c.threshold)),
        );
        if result == "FAIL" {
            out += &format!("    {} failed; witness: {}\n", c.reference, c.witness);
        }
    }
    out += &format!("\n{} checks, {fails} FAIL\n", p.checks.len());
    Ok(out)
}

// ---------------------------------------------------------------------------
// The suite
// ---------------------------------------------------------------------------

/// A `steps`-step grid ending at the horizon whose step respects the jump
/// mass cap and the contraction condition of the implicit update.
pub fn tree_grid(spec: &ProblemSpec, steps: usize) -> Result<TimeGrid> {
    let t = spec.horizon;
    let mut dt = t / steps as f64;
    let lambda = spec.levy.total_rate();
    if lambda > 0.0 {
        dt = dt.min(0.95 * MAX_JUMP_MASS / lambda);
    }
    if spec.lipschitz_c > 0.0 {
        dt = dt.min(0.9 / spec.lipschitz_c);
    }
    TimeGrid::new((t - steps as f64 * dt).max(0.0), t, steps)
}

fn tree_gauss(cfg: &VerifyConfig) -> usize {
    cfg.gauss.min(MAX_TREE_GAUSS)
}

fn uniform_values(n: usize, v: f64) -> Vec<f64> {
    vec![v; n]
}

fn record_error(name: &str, reference: &str, e: Error) -> Result<CheckRecord> {
    match e {
        Error::SizeLimit(msg) => Ok(CheckRecord::skip(name, reference, msg)),
        other => Err(other),
    }
}

fn with_extra_driver(spec: &ProblemSpec, extra: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>) -> ProblemSpec {
    let base = spec.coefficients.clone();
    let inner = spec.coefficients.clone();
    let mut out = spec.clone();
    out.coefficients = Arc::new(WithDriver {
        inner,
        driver: Arc::new(move |t, x, y, z, k, u, v| base.driver(t, x, y, z, k, u, v) + extra(t, x)),
    });
    out.family = None;
    out
}

const COMPARISON: &str = "comparison theorem for BSDEs with jumps";

fn check_comparison(spec: &ProblemSpec, cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> Result<CheckRecord> {
    let name = "comparison";
    let grid = tree_grid(spec, 3)?;
    let mut worst = f64::INFINITY;
    let mut hypotheses_failed = Vec::new();
    let mut violations = 0;
    for trial in 0..cfg.comparison_pairs {
        let c1 = rng.random_range(0.0..0.5);
        let slope = rng.random_range(0.0..0.5);
        let shift = rng.random_range(0.0..0.5);
        let x0: Vec<f64> = (0..spec.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = ConstantPolicy(rng.random_range(0..spec.u_set.len()));
        let v = ConstantPolicy(rng.random_range(0..spec.v_set.len()));
        let upper = with_extra_driver(
            spec,
            Arc::new(move |_, x: &[f64]| c1 + slope * x.iter().map(|a| a.abs()).sum::<f64>().min(1.0)),
        );
        let xi_a = |x: &[f64]| spec.terminal(x) + shift;
        let xi_b = |x: &[f64]| spec.terminal(x);
        let probe = ComparisonProbe {
            seed: cfg.seed ^ trial as u64,
            n_probes: 50,
            ..ComparisonProbe::default()
        };
        let rep = match comparison_check(&upper, &xi_a, spec, &xi_b, &grid, tree_gauss(cfg), &u, &v, &x0, &probe, 1e-10) {
            Ok(r) => r,
            Err(e) => return record_error(name, COMPARISON, e),
        };
        match rep.passed {
            None => hypotheses_failed.push(rep.notes.join("; ")),
            Some(ok) => {
                worst = worst.min(rep.min_difference);
                if !ok {
                    violations += 1;
                }
            }
        }
    }
    if !hypotheses_failed.is_empty() {
        return Ok(CheckRecord::skip(
            name,
            COMPARISON,
            format!("hypotheses not met: {}", hypotheses_failed[0]),
        ));
    }
    Ok(CheckRecord::new(name, COMPARISON, Relation::AtMost, Some(violations as f64), 0.0).with(json!({
        "pairs": cfg.comparison_pairs,
        "min_difference": worst,
        "tolerance": 1e-10,
        "tree_steps": grid.n_steps,
        "t0": grid.t0,
    })))
}

const STABILITY: &str = "a-priori stability estimate for BSDEs with jumps";

fn check_stability(spec: &ProblemSpec, cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> Result<CheckRecord> {
    let name = "stability";
    let grid = tree_grid(spec, 3)?;
    let beta = stability_beta_threshold(spec.lipschitz_c);
    let mut failures = 0;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..cfg.stability_trials {
        let (a, b, shift) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let x0: Vec<f64> = (0..spec.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = ConstantPolicy(rng.random_range(0..spec.u_set.len()));
        let v = ConstantPolicy(rng.random_range(0..spec.v_set.len()));
        let phi_2: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync> = Arc::new(move |_, x: &[f64]| a + b * x[0].sin());
        let xi_2 = |x: &[f64]| spec.terminal(x) + shift;
        let xi_1 = |x: &[f64]| spec.terminal(x);
        let rep = match stability_check(
            spec,
            Arc::new(|_, _| 0.0),
            phi_2,
            &xi_1,
            &xi_2,
            beta,
            &grid,
            tree_gauss(cfg),
            &u,
            &v,
            &x0,
        ) {
            Ok(r) => r,
            Err(e) => return record_error(name, STABILITY, e),
        };
        if rep.rhs > 0.0 {
            worst_ratio = worst_ratio.max(rep.lhs / rep.rhs);
        }
        if !rep.passed {
            failures += 1;
        }
    }
    Ok(CheckRecord::new(name, STABILITY, Relation::AtMost, Some(failures as f64), 0.0).with(json!({
        "trials": cfg.stability_trials,
        "beta": beta,
        "max_lhs_over_rhs": worst_ratio,
        "slack": 10.0 * grid.dt(),
    })))
}

const DPP: &str = "dynamic programming principle";

/// Deepest tree (at most 3 steps) whose full game enumeration stays small.
fn dpp_tree_steps(spec: &ProblemSpec, gauss: usize) -> usize {
    let pairs = (spec.u_set.len() * spec.v_set.len()) as f64;
    let branching = gauss.pow(spec.d() as u32) * (spec.levy.len() + 1);
    (2..=3)
        .rev()
        .find(|&s| pairs.powi(s as i32) * tree_node_count(branching, s) <= 2e6)
        .unwrap_or(2)
}

fn check_dpp_tree(spec: &ProblemSpec, cfg: &VerifyConfig) -> Result<CheckRecord> {
    let name = "dpp_tree";
    let steps = dpp_tree_steps(spec, tree_gauss(cfg));
    let grid = tree_grid(spec, steps)?;
    let points = StateGrid::cube(spec.n(), 1.0, 3)?;
    let mut worst: f64 = 0.0;
    let mut per_split = Vec::new();
    for which in [Which::Lower, Which::Upper] {
        for split in 1..steps {
            match dpp_check(spec, which, &grid, &points, split, &Engine::tree(tree_gauss(cfg))) {
                Ok(r) => {
                    worst = worst.max(r.discrepancy);
                    per_split.push(json!({"which": which.name(), "split": split, "discrepancy": r.discrepancy}));
                }
                Err(e) => return record_error(name, DPP, e),
            }
        }
    }
    Ok(CheckRecord::new(name, DPP, Relation::AtMost, Some(worst), 1e-12).with(json!({
        "tree_steps": steps,
        "splits": per_split,
    })))
}

/// Largest ratio of consecutive rungs; 0 for a pair already under the floor.
fn ladder_ratio(values: &[f64]) -> f64 {
    values
        .windows(2)
        .map(|w| {
            if w[0] <= LADDER_FLOOR && w[1] <= LADDER_FLOOR {
                0.0
            } else {
                w[1] / w[0]
            }
        })
        .fold(0.0, f64::max)
}

fn base_grids(spec: &ProblemSpec, cfg: &VerifyConfig) -> Result<(TimeGrid, StateGrid)> {
    Ok((
        TimeGrid::new(0.0, spec.horizon, cfg.steps)?,
        StateGrid::cube(spec.n(), cfg.xbox, cfg.xnodes)?,
    ))
}

fn check_dpp_ladder(spec: &ProblemSpec, cfg: &VerifyConfig) -> Result<CheckRecord> {
    let (grid, sgrid) = base_grids(spec, cfg)?;
    let ladder = dpp_ladder(spec, Which::Lower, &grid, &sgrid, cfg.steps / 2, &Engine::grid(cfg.gauss), 3)?;
    let d: Vec<f64> = ladder.rungs.iter().map(|r| r.discrepancy).collect();
    Ok(CheckRecord::new("dpp_grid_ladder", DPP, Relation::Below, Some(ladder_ratio(&d)), 1.0)
        .passing(ladder.monotone)
        .with(json!({
            "discrepancies": d,
            "dx": ladder.rungs.iter().map(|r| r.dx).collect::<Vec<_>>(),
            "steps": ladder.rungs.iter().map(|r| r.n_steps).collect::<Vec<_>>(),
        })))
}

fn check_regularity(spec: &ProblemSpec, cfg: &VerifyConfig) -> Result<Vec<CheckRecord>> {
    // Half the base spacing on a box one unit wider, so the inner window
    // stays clear of the extrapolated boundary.
    let half = cfg.xbox + 1.0;
    let dx = 2.0 * cfg.xbox / (cfg.xnodes - 1) as f64 / 2.0;
    let nodes = ((2.0 * half / dx).round() as usize + 1).max(33);
    let steps = cfg.steps.max(8);
    let mut reports = Vec::new();
    for r in 0..2 {
        let grid = TimeGrid::new(0.0, spec.horizon, steps << r)?;
        let sgrid = StateGrid::cube(spec.n(), half, (nodes - 1) * (1 << r) + 1)?;
        let field = solve_value(spec, Which::Lower, &grid, &sgrid, &Engine::grid(cfg.gauss))?;
        reports.push(regularity_check(&field)?);
    }
    let (a, b) = (&reports[0], &reports[1]);
    let change = if a.spatial_ratio > 0.0 {
        (b.spatial_ratio - a.spatial_ratio).abs() / a.spatial_ratio
    } else {
        (b.spatial_ratio - a.spatial_ratio).abs()
    };
    let spatial = CheckRecord::new(
        "spatial_lipschitz",
        "Lipschitz continuity of the value in x",
        Relation::AtMost,
        Some(change),
        0.1,
    )
    .with(json!({
        "ratios": [a.spatial_ratio, b.spatial_ratio],
        "growth_ratios": [a.growth_ratio, b.growth_ratio],
    }));
    let reference = "1/2-Hölder continuity of the value in t";
    let holder = match a.holder_alpha {
        Some(alpha) => CheckRecord::new("time_holder", reference, Relation::AtLeast, Some(alpha), 0.45)
            .with(json!({ "constant": a.holder_constant, "lags": a.lags })),
        None => {
            let mut rec = CheckRecord::new("time_holder", reference, Relation::AtLeast, None, 0.45)
                .with(json!({ "note": "field constant in time; the bound holds with C = 0" }));
            rec.passed = true;
            rec
        }
    };
    Ok(vec![spatial, holder])
}

const DETERMINISM: &str = "the value is deterministic";

fn check_determinism(spec: &ProblemSpec, cfg: &VerifyConfig) -> Result<CheckRecord> {
    let t = spec.horizon / 2.0;
    let span = spec.horizon - t;
    let min_steps = (spec.levy.total_rate() * span / (0.95 * MAX_JUMP_MASS)).ceil() as usize;
    let n_steps = (cfg.steps / 2).max(min_steps).max(2);
    let setup = DeterminismSetup {
        t,
        x: uniform_values(spec.n(), 0.0),
        ell: span / n_steps as f64 * 2.0,
        n_steps,
        n_paths: cfg.determinism_paths,
        seed: cfg.seed,
        sgrid: StateGrid::cube(spec.n(), cfg.xbox, cfg.xnodes)?,
        gauss: cfg.gauss,
    };
    let nu = spec.u_set.len();
    let u = FeedbackPolicy::new(move |_, _, x: &[f64]| if x[0] > 0.0 { 0 } else { nu - 1 });
    let v = ConstantPolicy(spec.v_set.len() / 2);
    let rep = determinism_check(spec, &setup, &u, &v)?;
    Ok(
        CheckRecord::new("determinism", DETERMINISM, Relation::AtMost, Some(rep.z_score), 3.0)
            .passing(rep.passed())
            .with(serde_json::to_value(&rep)?),
    )
}

fn check_isaacs(spec: &ProblemSpec, cfg: &VerifyConfig) -> Result<Vec<CheckRecord>> {
    let (grid, sgrid) = base_grids(spec, cfg)?;
    let engine = Engine::grid(cfg.gauss);
    let lower = solve_value(spec, Which::Lower, &grid, &sgrid, &engine)?;
    let upper = solve_value(spec, Which::Upper, &grid, &sgrid, &engine)?;
    let pairs = || lower.values.iter().flatten().zip(upper.values.iter().flatten());
    let excess = pairs().map(|(w, u)| w - u).fold(f64::NEG_INFINITY, f64::max);
    let distance = pairs().map(|(w, u)| (w - u).abs()).fold(0.0, f64::max);
    let probe = GridField {
        grid: &sgrid,
        values: &lower.values[0],
    };
    let gap = isaacs_gap(spec, &grid, &sgrid, &probe, 0.0)?;
    let ordering = CheckRecord::new(
        "saddle_ordering",
        "lower value below upper value",
        Relation::AtMost,
        Some(excess),
        1e-12,
    );
    let reference = "Isaacs condition implies lower = upper";
    let step_gap = lower.step_gap.unwrap_or(f64::INFINITY).max(upper.step_gap.unwrap_or(f64::INFINITY));
    let witness = json!({
        "step_game_gap": step_gap,
        "hamiltonian_max_gap": gap.max_gap,
        "hamiltonian_mean_gap": gap.mean_gap,
        "hamiltonian_argmax": gap.argmax,
    });
    // The discrete recursions collapse when their own step games have a
    // saddle point; the Hamiltonian gap is reported alongside.
    let collapse = if step_gap <= 1e-12 {
        CheckRecord::new("isaacs_collapse", reference, Relation::AtMost, Some(distance), 1e-10).with(witness)
    } else {
        let mut rec = CheckRecord::skip("isaacs_collapse", reference, "the step games have no saddle point".into());
        rec.statistic = Some(distance);
        rec.threshold = 1e-10;
        rec.witness = witness;
        rec
    };
    Ok(vec![ordering, collapse])
}

const CROSS: &str = "PIDE and dynamic programming converge to the same value";

fn check_cross(spec: &ProblemSpec, cfg: &VerifyConfig) -> Result<Vec<CheckRecord>> {
    let half = (cfg.xbox - 1.0).max(1.0);
    let engine = Engine::grid(cfg.gauss);
    let rungs = [cfg.cross_dx, cfg.cross_dx / 2.0]
        .iter()
        .map(|dx| cross_rung(spec, Which::Lower, half, *dx, cfg.cfl, &engine))
        .collect::<Result<Vec<CrossRung>>>()?;
    let d: Vec<f64> = rungs.iter().map(|r| r.distance).collect();
    let cross = CheckRecord::new("cross_solver", CROSS, Relation::AtMost, Some(d[0]), 5e-2)
        .with(serde_json::to_value(&rungs)?);
    let cross = {
        let ok = cross.passed && decreasing(d.iter().copied());
        cross.passing(ok)
    };

    let nodes = (2.0 * half / cfg.cross_dx).round() as usize + 1;
    let sgrid = StateGrid::cube(spec.n(), half, nodes)?;
    let steps = cfl_steps(spec, 0.0, &sgrid, 0.0, cfg.cfl)?;
    let scheme = PideScheme {
        grid: TimeGrid::new(0.0, spec.horizon, steps)?,
        sgrid,
        delta_j: 0.0,
        cfl_target: cfg.cfl,
    };
    let lo = solve_pide(spec, Which::Lower, &scheme)?;
    let up = solve_pide(spec, Which::Upper, &scheme)?;
    // Linear extrapolation at the boundary is not monotone, so the ordering
    // is only inherited away from it.
    let window = crate::game::inner_window(&scheme.sgrid, crate::pide::CROSS_WINDOW);
    let excess = lo
        .values
        .iter()
        .zip(&up.values)
        .flat_map(|(a, b)| window.iter().map(move |&i| a[i] - b[i]))
        .fold(f64::NEG_INFINITY, f64::max);
    let ordering = CheckRecord::new(
        "pide_ordering",
        "lower PIDE solution below upper PIDE solution",
        Relation::AtMost,
        Some(excess),
        1e-10,
    );
    Ok(vec![cross, ordering])
}

fn check_scheme(spec: &ProblemSpec, cfg: &VerifyConfig) -> Result<Vec<CheckRecord>> {
    let half = (cfg.xbox - 1.0).max(1.0);
    let sgrid = StateGrid::cube(spec.n(), half, 41)?;
    let steps = cfl_steps(spec, 0.0, &sgrid, 0.0, cfg.cfl)?;
    let scheme = PideScheme {
        grid: TimeGrid::new(0.0, spec.horizon, steps)?,
        sgrid,
        delta_j: 0.0,
        cfl_target: cfg.cfl,
    };
    let mono = monotonicity_check(spec, Which::Lower, &scheme, 0, cfg.monotone_pairs, cfg.seed)?;
    let monotone = CheckRecord::new(
        "pide_monotonicity",
        "monotone explicit scheme",
        Relation::AtMost,
        Some(mono.worst_violation),
        mono.tolerance,
    )
    .passing(mono.passed)
    .with(serde_json::to_value(&mono)?);

    // A base spacing incommensurate with the probe points keeps the ladder
    // from landing on nodes where the central differences happen to be exact.
    let base = StateGrid::cube(spec.n(), 2.0, 22)?;
    let points: Vec<Vec<f64>> = (0..=100)
        .map(|i| uniform_values(spec.n(), -0.9 + 0.018 * i as f64))
        .collect();
    let cons = consistency_check(spec, (0.3, -0.4, 0.7), &base, &points, 0.1 * spec.horizon, 3, 0.0)?;
    let consistency = CheckRecord::new(
        "hamiltonian_consistency",
        "second-order consistency on quadratics",
        Relation::AtMost,
        Some(cons.constant),
        cons.bound_constant,
    )
    .passing(cons.passed)
    .with(serde_json::to_value(&cons)?);
    Ok(vec![monotone, consistency])
}

fn check_leaf_mass(spec: &ProblemSpec, cfg: &VerifyConfig) -> Result<CheckRecord> {
    let reference = "probability conservation of the outcome tree";
    let grid = tree_grid(spec, 3)?;
    let params = TreeParams {
        x0: uniform_values(spec.n(), 0.0),
        t0: grid.t0,
        n_steps: grid.n_steps,
        gauss: tree_gauss(cfg),
    };
    let tree = match OutcomeTree::build(spec, &params, &ConstantPolicy(0), &ConstantPolicy(0)) {
        Ok(t) => t,
        Err(e) => return record_error("leaf_mass", reference, e),
    };
    let mass = tree.leaf_mass();
    Ok(
        CheckRecord::new("leaf_mass", reference, Relation::AtMost, Some((mass - 1.0).abs()), 1e-14)
            .with(json!({ "mass": mass, "nodes": tree.nodes.len() })),
    )
}

fn check_markov(spec: &ProblemSpec, cfg: &VerifyConfig) -> Result<CheckRecord> {
    let reference = "Markov representation Y = u(t, zeta)";
    let grid = tree_grid(spec, 3)?;
    let values = vec![uniform_values(spec.n(), -0.5), uniform_values(spec.n(), 0.5)];
    let history = History {
        n_samples: 1000,
        steps: 4,
        seed: cfg.seed,
    };
    let sgrid = StateGrid::cube(spec.n(), cfg.xbox, cfg.xnodes)?;
    let rep = match markov_identity_check(
        spec,
        &grid,
        &sgrid,
        &ConstantPolicy(0),
        &ConstantPolicy(0),
        &values,
        &history,
        &Engine::tree(tree_gauss(cfg)),
    ) {
        Ok(r) => r,
        Err(e) => return record_error("markov_identity", reference, e),
    };
    Ok(
        CheckRecord::new("markov_identity", reference, Relation::AtMost, Some(rep.max_discrepancy), 1e-12)
            .passing(rep.passed)
            .with(serde_json::to_value(&rep)?),
    )
}

/// Runs every check once on `spec`.
///
/// Failed hypothesis clauses abort with a validation error unless `force`
/// is set, in which case they are recorded and the suite still runs.
pub fn run_verify(spec: &ProblemSpec, scenario: &str, cfg: &VerifyConfig, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    let report = validate_hypotheses(
        spec,
        &ProbeConfig {
            seed: cfg.seed,
            ..ProbeConfig::default()
        },
    );
    let failing: Vec<String> = report.failures().iter().map(|c| c.clause.clone()).collect();
    if !failing.is_empty() && !force {
        return Err(Error::Validation(format!(
            "hypothesis clauses failed: {}",
            failing.join(", ")
        )));
    }
    let mut checks = vec![CheckRecord::new(
        "hypotheses",
        "standing hypotheses on the coefficients",
        Relation::AtMost,
        Some(failing.len() as f64),
        0.0,
    )
    .with(serde_json::to_value(&report)?)];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    checks.push(check_comparison(spec, cfg, &mut rng)?);
    checks.push(check_stability(spec, cfg, &mut rng)?);
    checks.push(check_dpp_tree(spec, cfg)?);
    checks.push(check_dpp_ladder(spec, cfg)?);
    checks.extend(check_regularity(spec, cfg)?);
    checks.push(check_determinism(spec, cfg)?);
    checks.extend(check_isaacs(spec, cfg)?);
    checks.extend(check_cross(spec, cfg)?);
    checks.extend(check_scheme(spec, cfg)?);
    checks.push(check_leaf_mass(spec, cfg)?);
    checks.push(check_markov(spec, cfg)?);

    let passed = checks.iter().all(|c| c.passed);
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(Manifest {
        metadata: Metadata {
            timestamp,
            version: env!("CARGO_PKG_VERSION").into(),
        },
        payload: Payload {
            scenario: scenario.into(),
            seed: cfg.seed,
            config: cfg.clone(),
            checks,
            passed,
        },
    })
}

// ---------------------------------------------------------------------------
// Refinement study
// ---------------------------------------------------------------------------

/// Cross-solver distance while `Δx` is halved `rungs - 1` times.
pub fn refine_ladder(spec: &ProblemSpec, which: Which, cfg: &VerifyConfig, rungs: usize) -> Result<Vec<CrossRung>> {
    if rungs == 0 {
        return Err(Error::Config("a ladder needs at least one rung".into()));
    }
    let half = (cfg.xbox - 1.0).max(1.0);
    (0..rungs)
        .map(|r| cross_rung(spec, which, half, cfg.cross_dx / (1u32 << r) as f64, cfg.cfl, &Engine::grid(cfg.gauss)))
        .collect()
}

/// Writes `rung, dx, nodes, pide_steps, dp_steps, cfl, cross_distance`.
pub fn write_refine_csv<W: std::io::Write>(rungs: &[CrossRung], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rung", "dx", "nodes", "pide_steps", "dp_steps", "cfl", "cross_distance"])?;
    for (i, r) in rungs.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.dx.to_string(),
            r.nodes.to_string(),
            r.pide_steps.to_string(),
            r.dp_steps.to_string(),
            r.cfl.to_string(),
            r.distance.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
