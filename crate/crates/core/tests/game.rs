mod common;

use sdgj::bsde::Engine;
use sdgj::game::{dpp_check, dpp_ladder, replay_discrepancy, solve_value, solve_value_from};
use sdgj::grid::{FnField, StateGrid};
use sdgj::levy_paths::TimeGrid;
use sdgj::oracle::{oracle_game, TreeParams, Which};
use sdgj::problem::{scenario, CustomCoefficients, SCENARIOS};
use sdgj::verify::tree_grid;

use common::{custom, separated_nonlinear};

const FIVE: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

fn one_step_game(drift: fn(f64, f64) -> f64) {
    let spec = custom(
        CustomCoefficients::default()
            .with_drift(move |_, _, u, v, out| out[0] = drift(u[0], v[0]))
            .with_diffusion(|_, _, _, _, out| out[0] = 0.3)
            .with_terminal(|x| x[0]),
        &FIVE,
        &FIVE,
        &[],
    );
    let grid = TimeGrid::new(0.9, 1.0, 1).unwrap();
    let sgrid = StateGrid::cube(1, 2.0, 9).unwrap();
    for which in [Which::Lower, Which::Upper] {
        let field = solve_value(&spec, which, &grid, &sgrid, &Engine::grid(3)).unwrap();
        for (i, x) in sgrid.nodes().iter().enumerate() {
            let params = TreeParams {
                x0: x.clone(),
                t0: 0.9,
                n_steps: 1,
                gauss: 3,
            };
            let tree = oracle_game(&spec, &params, which).unwrap().value;
            assert!((field.values[0][i] - tree).abs() <= 1e-12);
            assert!((tree - x[0]).abs() <= 1e-12, "{which:?} at {x:?}: {tree}");
        }
    }
}

#[test]
fn separated_one_step_games_keep_x() {
    one_step_game(|u, v| u - v);
    one_step_game(|u, v| u + v);
}

#[test]
fn selected_controls_replay_the_value() {
    for name in SCENARIOS {
        let spec = scenario(name).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let sgrid = StateGrid::cube(1, 3.0, 13).unwrap();
        for which in [Which::Lower, Which::Upper] {
            let engine = Engine::grid(5);
            let field = solve_value(&spec, which, &grid, &sgrid, &engine).unwrap();
            assert!(replay_discrepancy(&spec, &field, &engine).unwrap() <= 1e-12, "{name}");
        }
    }
}

#[test]
fn lower_value_below_upper_value_everywhere() {
    for name in SCENARIOS {
        let spec = scenario(name).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let sgrid = StateGrid::cube(1, 3.0, 25).unwrap();
        let w = solve_value(&spec, Which::Lower, &grid, &sgrid, &Engine::grid(5)).unwrap();
        let u = solve_value(&spec, Which::Upper, &grid, &sgrid, &Engine::grid(5)).unwrap();
        let excess = w.values.iter().flatten().zip(u.values.iter().flatten()).map(|(a, b)| a - b).fold(f64::MIN, f64::max);
        assert!(excess <= 1e-12, "{name}: {excess}");
    }
}

#[test]
fn raising_the_terminal_raises_the_value() {
    let spec = scenario("driver_coupled").unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
    let sgrid = StateGrid::cube(1, 3.0, 25).unwrap();
    let engine = Engine::grid(5);
    let base = solve_value(&spec, Which::Lower, &grid, &sgrid, &engine).unwrap();
    let bumped = FnField(|x: &[f64]| spec.terminal(x) + 0.2);
    let up = solve_value_from(&spec, Which::Lower, &grid, &sgrid, &bumped, &engine).unwrap();
    let window = sdgj::game::inner_window(&sgrid, 0.5);
    for k in 0..=16 {
        for &i in &window {
            assert!(up.values[k][i] >= base.values[k][i] - 1e-12);
        }
    }
}

#[test]
fn saddle_point_step_games_collapse_lower_and_upper() {
    let spec = separated_nonlinear();
    let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
    let sgrid = StateGrid::cube(1, 3.0, 25).unwrap();
    let w = solve_value(&spec, Which::Lower, &grid, &sgrid, &Engine::grid(5)).unwrap();
    let u = solve_value(&spec, Which::Upper, &grid, &sgrid, &Engine::grid(5)).unwrap();
    assert!(w.step_gap.unwrap() <= 1e-12);
    let dist = w.values.iter().flatten().zip(u.values.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dist <= 1e-10);

    let gap = scenario("bilinear_gap").unwrap();
    let w = solve_value(&gap, Which::Lower, &grid, &sgrid, &Engine::grid(5)).unwrap();
    assert!(w.step_gap.unwrap() > 1e-3);
}

#[test]
fn tree_dpp_is_exact_at_every_split() {
    let spec = scenario("separated_drift").unwrap();
    let grid = tree_grid(&spec, 2).unwrap();
    let points = StateGrid::cube(1, 1.0, 3).unwrap();
    for which in [Which::Lower, Which::Upper] {
        for split in 0..=2 {
            let r = dpp_check(&spec, which, &grid, &points, split, &Engine::tree(3)).unwrap();
            assert!(r.discrepancy <= 1e-12, "split {split}: {}", r.discrepancy);
        }
    }
}

#[test]
fn grid_dpp_discrepancy_shrinks() {
    let spec = scenario("jump_heavy").unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
    let sgrid = StateGrid::cube(1, 3.0, 25).unwrap();
    let ladder = dpp_ladder(&spec, Which::Upper, &grid, &sgrid, 8, &Engine::grid(5), 3).unwrap();
    assert!(ladder.monotone, "{:?}", ladder.rungs);
    assert!(ladder.rungs[0].discrepancy > ladder.rungs[2].discrepancy);
}
