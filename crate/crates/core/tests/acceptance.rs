//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines reach stdout under a
//! plain `cargo test`. Exits non-zero if any criterion fails.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdgj::bsde::{
    comparison_check, markov_identity_check, stability_beta_threshold, stability_check, ComparisonProbe, Engine,
    History, WithDriver,
};
use sdgj::forward::{ConstantPolicy, FeedbackPolicy};
use sdgj::game::{decreasing, determinism_check, dpp_check, dpp_ladder, regularity_check, solve_value, DeterminismSetup};
use sdgj::grid::{GridField, StateGrid};
use sdgj::levy_paths::TimeGrid;
use sdgj::oracle::{oracle_game, OutcomeTree, TreeParams, Which};
use sdgj::pide::{consistency_check, cross_rung, isaacs_gap, monotonicity_check, cfl_steps, PideScheme};
use sdgj::problem::{
    scenario, validate_hypotheses, CoefficientFamily, ControlSet, ProbeConfig, ProblemSpec, SinTerm, TerminalParams,
    SCENARIOS,
};
use sdgj::step::MAX_JUMP_MASS;
use sdgj::verify::{run_verify, tree_grid, VerifyConfig};
use sdgj::Result;

type Outcome = Result<(bool, String)>;

/// `separated_drift` with the terminal `0.6x + 0.3 sin x`, so its value
/// moves in time and the collapse and cross-solver checks are not met by a
/// field that stays equal to `x`.
fn separated_nonlinear() -> ProblemSpec {
    let base = scenario("separated_drift").unwrap();
    let family = base.family.clone().unwrap();
    let mut params = family.to_affine(base.dims).unwrap();
    params.terminal = TerminalParams {
        linear: vec![0.6],
        sin: Some(SinTerm { amp: 0.3, freq: 1.0 }),
        ..TerminalParams::default()
    };
    let spec = ProblemSpec::from_family(
        CoefficientFamily::Affine(params),
        base.dims,
        base.horizon,
        base.lipschitz_c,
        base.rho_scale,
        base.u_set.clone(),
        base.v_set.clone(),
        base.levy.clone(),
    )
    .unwrap();
    assert!(validate_hypotheses(&spec, &ProbeConfig::default()).passed());
    spec
}

fn all_scenarios() -> Vec<(&'static str, ProblemSpec)> {
    SCENARIOS.iter().map(|n| (*n, scenario(n).unwrap())).collect()
}

fn origin(spec: &ProblemSpec) -> Vec<f64> {
    vec![0.0; spec.n()]
}

fn with_extra_driver(spec: &ProblemSpec, extra: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> ProblemSpec {
    let base = spec.coefficients.clone();
    let mut out = spec.clone();
    out.coefficients = Arc::new(WithDriver {
        inner: spec.coefficients.clone(),
        driver: Arc::new(move |t, x, y, z, k, u, v| base.driver(t, x, y, z, k, u, v) + extra(x)),
    });
    out.family = None;
    out
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut pairs, mut violations, mut unmet) = (0, 0, 0);
    let mut worst = f64::INFINITY;
    for (_, spec) in all_scenarios() {
        let grid = tree_grid(&spec, 3)?;
        for trial in 0..40 {
            let (c1, slope, shift) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
            let x0: Vec<f64> = (0..spec.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = ConstantPolicy(rng.random_range(0..spec.u_set.len()));
            let v = ConstantPolicy(rng.random_range(0..spec.v_set.len()));
            let upper = with_extra_driver(&spec, move |x| c1 + slope * x.iter().map(|a| a.abs()).sum::<f64>().min(1.0));
            let xi_a = |x: &[f64]| spec.terminal(x) + shift;
            let xi_b = |x: &[f64]| spec.terminal(x);
            let probe = ComparisonProbe {
                seed: trial,
                n_probes: 50,
                ..ComparisonProbe::default()
            };
            let rep = comparison_check(&upper, &xi_a, &spec, &xi_b, &grid, 3, &u, &v, &x0, &probe, 1e-10)?;
            pairs += 1;
            match rep.passed {
                None => unmet += 1,
                Some(ok) => {
                    worst = worst.min(rep.min_difference);
                    violations += usize::from(!ok);
                }
            }
        }
    }
    Ok((
        violations == 0 && unmet == 0,
        format!("{pairs} pairs, {violations} violations, {unmet} with unmet hypotheses, min(y - y') = {worst:.3e}"),
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut trials, mut failures) = (0, 0);
    let mut worst: f64 = 0.0;
    for (_, spec) in all_scenarios() {
        let grid = tree_grid(&spec, 3)?;
        let beta = stability_beta_threshold(spec.lipschitz_c);
        for _ in 0..20 {
            let (a, b, shift) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let x0: Vec<f64> = (0..spec.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = ConstantPolicy(rng.random_range(0..spec.u_set.len()));
            let v = ConstantPolicy(rng.random_range(0..spec.v_set.len()));
            let xi_1 = |x: &[f64]| spec.terminal(x);
            let xi_2 = |x: &[f64]| spec.terminal(x) + shift;
            let rep = stability_check(
                &spec,
                Arc::new(|_, _| 0.0),
                Arc::new(move |_, x: &[f64]| a + b * x[0].sin()),
                &xi_1,
                &xi_2,
                beta,
                &grid,
                3,
                &u,
                &v,
                &x0,
            )?;
            trials += 1;
            failures += usize::from(!rep.passed);
            if rep.rhs > 0.0 {
                worst = worst.max(rep.lhs / rep.rhs);
            }
        }
    }
    Ok((failures == 0, format!("{trials} trials, {failures} failures, max lhs/rhs = {worst:.3}")))
}

fn criterion_3() -> Outcome {
    // Tree: every split of a 3-step tree with two controls per player.
    let mut tree_worst: f64 = 0.0;
    for (_, spec) in all_scenarios() {
        let mut coarse = spec.clone();
        let ends = |s: &ControlSet| vec![s.point(0).to_vec(), s.point(s.len() - 1).to_vec()];
        coarse.u_set = ControlSet::new("U", ends(&spec.u_set))?;
        coarse.v_set = ControlSet::new("V", ends(&spec.v_set))?;
        let grid = tree_grid(&coarse, 3)?;
        let points = StateGrid::cube(spec.n(), 1.0, 3)?;
        for which in [Which::Lower, Which::Upper] {
            for split in 0..=3 {
                let r = dpp_check(&coarse, which, &grid, &points, split, &Engine::tree(3))?;
                tree_worst = tree_worst.max(r.discrepancy);
            }
        }
    }
    // Grid: three-rung halving ladder on every scenario.
    let mut ladders = Vec::new();
    let mut monotone = true;
    for (name, spec) in all_scenarios() {
        let grid = TimeGrid::new(0.0, spec.horizon, 16)?;
        let sgrid = StateGrid::cube(spec.n(), 3.0, 25)?;
        let ladder = dpp_ladder(&spec, Which::Lower, &grid, &sgrid, 8, &Engine::grid(5), 3)?;
        monotone &= ladder.monotone;
        let d: Vec<String> = ladder.rungs.iter().map(|r| format!("{:.1e}", r.discrepancy)).collect();
        ladders.push(format!("{name} [{}]", d.join(", ")));
    }
    Ok((
        tree_worst <= 1e-12 && monotone,
        format!("tree max {tree_worst:.1e}; grid {}", ladders.join(", ")),
    ))
}

fn criterion_4() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let cases = [
        ("separated_drift", scenario("separated_drift")?),
        ("separated_drift(0.6x+0.3sin x)", separated_nonlinear()),
        ("jump_heavy", scenario("jump_heavy")?),
    ];
    for (name, spec) in cases {
        let mut reports = Vec::new();
        for r in 0..2 {
            let grid = TimeGrid::new(0.0, spec.horizon, 16 << r)?;
            let sgrid = StateGrid::cube(spec.n(), 4.0, 64 * (1 << r) + 1)?;
            let field = solve_value(&spec, Which::Lower, &grid, &sgrid, &Engine::grid(5))?;
            reports.push(regularity_check(&field)?);
        }
        let (a, b) = (&reports[0], &reports[1]);
        let change = (b.spatial_ratio - a.spatial_ratio).abs() / a.spatial_ratio;
        // A field that does not move in time meets the bound with constant 0.
        let holder_ok = a.holder_alpha.is_none_or(|alpha| alpha >= 0.45);
        ok &= change <= 0.1 && holder_ok;
        let alpha = a.holder_alpha.map_or("flat".to_string(), |x| format!("{x:.3}"));
        parts.push(format!("{name}: Lipschitz change {:.1}%, alpha {alpha}", 100.0 * change));
    }
    Ok((ok, parts.join("; ")))
}

fn criterion_5() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["separated_drift", "jump_heavy"] {
        let spec = scenario(name)?;
        let t = spec.horizon / 2.0;
        let span = spec.horizon - t;
        let min_steps = (spec.levy.total_rate() * span / (0.95 * MAX_JUMP_MASS)).ceil() as usize;
        let n_steps = min_steps.max(8);
        let setup = DeterminismSetup {
            t,
            x: origin(&spec),
            ell: 2.0 * span / n_steps as f64,
            n_steps,
            n_paths: 10_000,
            seed: 5,
            sgrid: StateGrid::cube(spec.n(), 3.0, 25)?,
            gauss: 5,
        };
        let nu = spec.u_set.len();
        let u = FeedbackPolicy::new(move |_, _, x: &[f64]| if x[0] > 0.0 { 0 } else { nu - 1 });
        let v = ConstantPolicy(spec.v_set.len() / 2);
        let rep = determinism_check(&spec, &setup, &u, &v)?;
        ok &= rep.swap_difference == 0.0 && rep.z_score <= 3.0 && rep.control_detected;
        parts.push(format!(
            "{name}: swap dJ {:.1e}, z {:.2}, control dJ {:.2e}",
            rep.swap_difference, rep.z_score, rep.control_difference
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn criterion_6() -> Outcome {
    let engine = Engine::grid(5);
    let mut ok = true;
    let mut parts = Vec::new();
    let cases = [
        ("separated_drift", scenario("separated_drift")?),
        ("separated_drift(0.6x+0.3sin x)", separated_nonlinear()),
    ];
    for (name, spec) in cases {
        let grid = TimeGrid::new(0.0, spec.horizon, 16)?;
        let sgrid = StateGrid::cube(spec.n(), 3.0, 25)?;
        let w = solve_value(&spec, Which::Lower, &grid, &sgrid, &engine)?;
        let u = solve_value(&spec, Which::Upper, &grid, &sgrid, &engine)?;
        let probe = GridField {
            grid: &sgrid,
            values: &w.values[0],
        };
        let gap = isaacs_gap(&spec, &grid, &sgrid, &probe, 0.0)?.max_gap;
        let dist = w.values.iter().flatten().zip(u.values.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ok &= gap <= 1e-12 && dist <= 1e-10;
        parts.push(format!("{name}: gap {gap:.1e}, |W-U| {dist:.1e}"));
    }

    let spec = scenario("bilinear_gap")?;
    let grid = TimeGrid::new(0.0, spec.horizon, 16)?;
    let sgrid = StateGrid::cube(spec.n(), 3.0, 25)?;
    let w = solve_value(&spec, Which::Lower, &grid, &sgrid, &engine)?;
    let u = solve_value(&spec, Which::Upper, &grid, &sgrid, &engine)?;
    let probe = GridField {
        grid: &sgrid,
        values: &w.values[0],
    };
    let gap = isaacs_gap(&spec, &grid, &sgrid, &probe, 0.0)?.max_gap;
    let excess = w.values.iter().flatten().zip(u.values.iter().flatten()).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max);
    let tree = tree_grid(&spec, 2)?;
    let params = TreeParams {
        x0: origin(&spec),
        t0: tree.t0,
        n_steps: 2,
        gauss: 3,
    };
    let tree_lo = oracle_game(&spec, &params, Which::Lower)?.value;
    let tree_up = oracle_game(&spec, &params, Which::Upper)?.value;
    ok &= gap > 0.0 && excess <= 1e-12 && tree_lo < tree_up;
    parts.push(format!(
        "bilinear_gap: gap {gap:.3e}, max(W-U) {excess:.1e}, tree lower {tree_lo:.4} < upper {tree_up:.4}"
    ));
    Ok((ok, parts.join("; ")))
}

fn criterion_7() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let cases = [
        ("separated_drift", scenario("separated_drift")?),
        ("separated_drift(0.6x+0.3sin x)", separated_nonlinear()),
    ];
    for (name, spec) in cases {
        let d: Vec<f64> = [0.05, 0.025]
            .iter()
            .map(|dx| cross_rung(&spec, Which::Lower, 2.0, *dx, 0.9, &Engine::grid(5)).map(|r| r.distance))
            .collect::<Result<_>>()?;
        ok &= d[0] <= 5e-2 && decreasing(d.iter().copied());
        parts.push(format!("{name}: {:.3e} -> {:.3e}", d[0], d[1]));
    }
    Ok((ok, parts.join("; ")))
}

fn criterion_8() -> Outcome {
    let mut worst: f64 = 0.0;
    for (_, spec) in all_scenarios() {
        let grid = tree_grid(&spec, 3)?;
        let values = vec![vec![-0.5; spec.n()], vec![0.5; spec.n()]];
        let history = History {
            n_samples: 1000,
            steps: 4,
            seed: 8,
        };
        let rep = markov_identity_check(
            &spec,
            &grid,
            &StateGrid::cube(spec.n(), 3.0, 25)?,
            &ConstantPolicy(0),
            &ConstantPolicy(spec.v_set.len() - 1),
            &values,
            &history,
            &Engine::tree(3),
        )?;
        worst = worst.max(rep.max_discrepancy);
    }
    Ok((worst <= 1e-12, format!("max discrepancy {worst:.1e} over {} scenarios", SCENARIOS.len())))
}

fn criterion_9() -> Outcome {
    let (mut mono_worst, mut mass_worst) = (f64::NEG_INFINITY, 0.0f64);
    let mut mono_ok = true;
    let mut cons_ok = true;
    let mut cons = Vec::new();
    for (name, spec) in all_scenarios() {
        let sgrid = StateGrid::cube(spec.n(), 2.0, 41)?;
        let steps = cfl_steps(&spec, 0.0, &sgrid, 0.0, 0.9)?;
        let scheme = PideScheme {
            grid: TimeGrid::new(0.0, spec.horizon, steps)?,
            sgrid,
            delta_j: 0.0,
            cfl_target: 0.9,
        };
        for which in [Which::Lower, Which::Upper] {
            let m = monotonicity_check(&spec, which, &scheme, 0, 100, 9)?;
            mono_ok &= m.passed;
            mono_worst = mono_worst.max(m.worst_violation);
        }

        let base = StateGrid::cube(spec.n(), 2.0, 22)?;
        let points: Vec<Vec<f64>> = (0..=100).map(|i| vec![-0.9 + 0.018 * i as f64; spec.n()]).collect();
        let c = consistency_check(&spec, (0.3, -0.4, 0.7), &base, &points, 0.1 * spec.horizon, 3, 0.0)?;
        cons_ok &= c.passed;
        cons.push(format!("{name} {:.2}/{:.2}", c.constant, c.bound_constant));

        let grid = tree_grid(&spec, 3)?;
        let params = TreeParams {
            x0: origin(&spec),
            t0: grid.t0,
            n_steps: 3,
            gauss: 3,
        };
        let tree = OutcomeTree::build(&spec, &params, &ConstantPolicy(0), &ConstantPolicy(0))?;
        mass_worst = mass_worst.max((tree.leaf_mass() - 1.0).abs());
    }
    Ok((
        mono_ok && cons_ok && mass_worst <= 1e-14,
        format!(
            "monotone max(step lo - step hi) {mono_worst:.1e}; error/dx^2 vs bound {}; leaf mass |1 - m| {mass_worst:.1e}",
            cons.join(", ")
        ),
    ))
}

fn criterion_10() -> Outcome {
    let cfg = VerifyConfig {
        seed: 10,
        comparison_pairs: 20,
        stability_trials: 10,
        determinism_paths: 2000,
        monotone_pairs: 10,
        ..VerifyConfig::default()
    };
    let spec = scenario("jump_heavy")?;
    let a = run_verify(&spec, "jump_heavy", &cfg, false)?.payload_json()?;
    let b = run_verify(&spec, "jump_heavy", &cfg, false)?.payload_json()?;
    let other = run_verify(&spec, "jump_heavy", &VerifyConfig { seed: 11, ..cfg }, false)?.payload_json()?;
    Ok((
        a == b && a != other,
        format!("{} payload bytes identical: {}; another seed differs: {}", a.len(), a == b, a != other),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("comparison, 200 random pairs on the tree", criterion_1),
        ("stability estimate, 100 random 3-step instances", criterion_2),
        ("DPP exact on the tree, grid ladder decreasing", criterion_3),
        ("regularity: Lipschitz stable, Hölder exponent >= 0.45", criterion_4),
        ("determinism of the cost estimator", criterion_5),
        ("Isaacs value and bilinear gap", criterion_6),
        ("cross-solver convergence", criterion_7),
        ("Markov identity on the tree", criterion_8),
        ("scheme monotonicity, consistency, leaf mass", criterion_9),
        ("reproducible verify payload", criterion_10),
    ];
    let mut failed = 0;
    for (i, (title, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (passed, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!(
            "criterion {:>2} {}: {title}: {detail} ({:.1}s)",
            i + 1,
            if passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
