mod common;

use sdgj::bsde::{
    comparison_check, markov_identity_check, semigroup_at, solve_bsde, ComparisonProbe, Engine, History,
};
use sdgj::forward::ConstantPolicy;
use sdgj::game::inner_window;
use sdgj::grid::{FnField, StateGrid};
use sdgj::levy_paths::TimeGrid;
use sdgj::oracle::{oracle_bsde, TreeParams};
use sdgj::problem::{scenario, CustomCoefficients};
use sdgj::verify::tree_grid;

use common::{affine_coupled, custom};

#[test]
fn grid_solver_matches_the_tree_on_affine_data() {
    let spec = affine_coupled(Some(&[0.0]));
    let grid = tree_grid(&spec, 3).unwrap();
    let sgrid = StateGrid::cube(1, 3.0, 13).unwrap();
    let (u, v) = (ConstantPolicy(0), ConstantPolicy(0));
    let phi = FnField(|x: &[f64]| spec.terminal(x));
    let sol = solve_bsde(&spec, &grid, &sgrid, &u, &v, &phi, &Engine::grid(3)).unwrap();
    for x0 in [-1.0, 0.0, 0.5, 1.7] {
        let params = TreeParams {
            x0: vec![x0],
            t0: grid.t0,
            n_steps: 3,
            gauss: 3,
        };
        let tree = oracle_bsde(&spec, &params, &u, &v, &|x| spec.terminal(x)).unwrap();
        assert!((sol.y_at(0, &[x0]) - tree.y).abs() <= 1e-12, "x0={x0}");
    }
    // Terminal row equals the datum at the nodes.
    for (i, x) in sgrid.nodes().iter().enumerate() {
        assert_eq!(sol.y[3][i], spec.terminal(x));
    }
}

#[test]
fn semigroup_of_a_driver_free_of_the_solution_is_an_expectation() {
    let (sigma, drift) = (0.3, 0.4);
    let atoms = [(1.0, 1.0), (-0.5, 0.5)];
    let spec = custom(
        CustomCoefficients::default()
            .with_drift(move |_, _, _, _, out| out[0] = drift)
            .with_diffusion(move |_, _, _, _, out| out[0] = sigma)
            .with_jump(|_, _, _, _, e, out| out[0] = 0.2 * e[0])
            .with_driver(|_, x, _, _, _, _, _| 0.5 + 0.1 * x[0]),
        &[0.0],
        &[0.0],
        &atoms,
    );
    let block = TimeGrid::new(0.9, 1.0, 1).unwrap();
    let h = block.dt();
    let eta = FnField(|x: &[f64]| x[0] * x[0]);
    // One Euler step with at most one jump: the jump part takes 0.2 e_i
    // with probability λ_i h and is compensated by its mean.
    let m: f64 = atoms.iter().map(|(e, l)| l * h * 0.2 * e).sum();
    let second: f64 = atoms.iter().map(|(e, l)| l * h * (0.2 * e).powi(2)).sum();
    let sgrid = StateGrid::cube(1, 3.0, 13).unwrap();
    for x in [-1.0, 0.0, 0.8] {
        let mean = x + drift * h;
        let expected = mean * mean + sigma * sigma * h + second - m * m + h * (0.5 + 0.1 * x);
        for engine in [Engine::tree(3), Engine::grid(3)] {
            let got = semigroup_at(&spec, &block, &sgrid, &ConstantPolicy(0), &ConstantPolicy(0), &eta, &engine, &[x]).unwrap();
            assert!((got - expected).abs() <= 1e-12, "x={x}: {got} vs {expected}");
        }
    }
}

#[test]
fn semigroup_blocks_compose_on_the_tree() {
    let spec = scenario("jump_heavy").unwrap();
    let grid = tree_grid(&spec, 3).unwrap();
    let head = grid.slice(0, 1).unwrap();
    let tail = grid.slice(1, 3).unwrap();
    let sgrid = StateGrid::cube(1, 3.0, 5).unwrap();
    let engine = Engine::tree(3);
    let (u, v) = (ConstantPolicy(2), ConstantPolicy(0));
    let phi = FnField(|x: &[f64]| spec.terminal(x));
    let inner = FnField(|x: &[f64]| semigroup_at(&spec, &tail, &sgrid, &u, &v, &phi, &engine, x).unwrap());
    for x in [-0.7, 0.0, 0.4] {
        let whole = semigroup_at(&spec, &grid, &sgrid, &u, &v, &phi, &engine, &[x]).unwrap();
        let composed = semigroup_at(&spec, &head, &sgrid, &u, &v, &inner, &engine, &[x]).unwrap();
        assert!((whole - composed).abs() <= 1e-10, "x={x}");
    }
}

#[test]
fn comparison_examples() {
    let spec = scenario("driver_coupled").unwrap();
    let grid = tree_grid(&spec, 2).unwrap();
    let (u, v) = (ConstantPolicy(0), ConstantPolicy(2));
    let probe = ComparisonProbe::default();
    let phi = |x: &[f64]| spec.terminal(x);
    let same = comparison_check(&spec, &phi, &spec, &phi, &grid, 3, &u, &v, &[0.2], &probe, 1e-10).unwrap();
    assert_eq!(same.min_difference, 0.0);
    assert_eq!(same.passed, Some(true));

    let shifted = |x: &[f64]| spec.terminal(x) + 1.0;
    let rep = comparison_check(&spec, &shifted, &spec, &phi, &grid, 3, &u, &v, &[0.2], &probe, 1e-10).unwrap();
    assert_eq!(rep.passed, Some(true));
    // The driver's y coefficient is -0.5, so the unit gap decays at rate
    // at most C over the remaining time.
    let span = spec.horizon - grid.t0;
    assert!(rep.root_difference >= (-spec.lipschitz_c * span).exp() - 1e-12);
    assert!(rep.root_difference <= 1.0);

    // Reversed roles violate the terminal ordering.
    let rev = comparison_check(&spec, &phi, &spec, &shifted, &grid, 3, &u, &v, &[0.2], &probe, 1e-10).unwrap();
    assert_eq!(rev.passed, None);
}

#[test]
fn grid_solutions_inherit_the_comparison() {
    let spec = scenario("jump_heavy").unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
    let sgrid = StateGrid::cube(1, 3.0, 25).unwrap();
    let (u, v) = (ConstantPolicy(1), ConstantPolicy(0));
    let lo = FnField(|x: &[f64]| spec.terminal(x));
    let hi = FnField(|x: &[f64]| spec.terminal(x) + 0.3 * (1.0 - x[0].abs()).max(0.0));
    let a = solve_bsde(&spec, &grid, &sgrid, &u, &v, &hi, &Engine::grid(5)).unwrap();
    let b = solve_bsde(&spec, &grid, &sgrid, &u, &v, &lo, &Engine::grid(5)).unwrap();
    // Jump targets near the edge are extrapolated linearly, which does not
    // preserve order; the ordering is checked away from the boundary.
    let window = inner_window(&sgrid, 0.5);
    let min = a
        .y
        .iter()
        .zip(&b.y)
        .flat_map(|(p, q)| window.iter().map(move |&i| p[i] - q[i]))
        .fold(f64::INFINITY, f64::min);
    assert!(min >= -1e-6, "min difference {min}");
    // Linear growth of the value over the box.
    let growth = sgrid.nodes().iter().zip(&a.y[0]).map(|(x, y)| y.abs() / (1.0 + x[0].abs())).fold(0.0, f64::max);
    assert!(growth < 10.0);
}

#[test]
fn markov_identity_cases() {
    let spec = scenario("separated_drift").unwrap();
    let grid = tree_grid(&spec, 3).unwrap();
    let sgrid = StateGrid::cube(1, 3.0, 25).unwrap();
    let history = History {
        n_samples: 400,
        steps: 4,
        seed: 3,
    };
    let (u, v) = (ConstantPolicy(4), ConstantPolicy(1));
    let single = markov_identity_check(&spec, &grid, &sgrid, &u, &v, &[vec![0.3]], &history, &Engine::tree(3)).unwrap();
    assert_eq!(single.max_discrepancy, 0.0);

    let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
    let rep = markov_identity_check(&spec, &grid, &sgrid, &u, &v, &[vec![-0.5], vec![0.5]], &history, &Engine::grid(5)).unwrap();
    assert!(rep.max_discrepancy <= rep.interpolation_bound + 1e-12, "{rep:?}");
    assert!(rep.passed);
}

