#![allow(dead_code)]

use std::sync::Arc;

use sdgj::levy_paths::{Atom, LevyMeasure};
use sdgj::problem::{scenario, CoefficientFamily, ControlSet, CustomCoefficients, Dims, ProblemSpec, TerminalParams};

pub const DIMS: Dims = Dims {
    state: 1,
    brownian: 1,
    mark: 1,
};

pub fn levy(atoms: &[(f64, f64)]) -> LevyMeasure {
    LevyMeasure::new(atoms.iter().map(|&(m, r)| Atom { mark: vec![m], rate: r }).collect()).unwrap()
}

pub fn custom(coeffs: CustomCoefficients, u: &[f64], v: &[f64], atoms: &[(f64, f64)]) -> ProblemSpec {
    ProblemSpec::from_coefficients(
        Arc::new(coeffs),
        DIMS,
        1.0,
        1.0,
        ControlSet::scalar("U", u).unwrap(),
        ControlSet::scalar("V", v).unwrap(),
        levy(atoms),
    )
    .unwrap()
}

/// `name` with its terminal replaced and, optionally, its control sets.
pub fn with_terminal(name: &str, terminal: TerminalParams, controls: Option<&[f64]>) -> ProblemSpec {
    let base = scenario(name).unwrap();
    let mut params = base.family.clone().unwrap().to_affine(base.dims).unwrap();
    params.terminal = terminal;
    let (u, v) = match controls {
        Some(c) => (ControlSet::scalar("U", c).unwrap(), ControlSet::scalar("V", c).unwrap()),
        None => (base.u_set.clone(), base.v_set.clone()),
    };
    ProblemSpec::from_family(
        CoefficientFamily::Affine(params),
        base.dims,
        base.horizon,
        base.lipschitz_c,
        base.rho_scale,
        u,
        v,
        base.levy.clone(),
    )
    .unwrap()
}

/// `driver_coupled` with a linear terminal: every coefficient is affine in
/// `x` and the driver is linear, so the value is affine in `x` and grid
/// interpolation adds no error.
pub fn affine_coupled(controls: Option<&[f64]>) -> ProblemSpec {
    with_terminal(
        "driver_coupled",
        TerminalParams {
            constant: 0.1,
            linear: vec![0.7],
            ..TerminalParams::default()
        },
        controls,
    )
}

/// `separated_drift` with terminal `0.6x + 0.3 sin x`.
pub fn separated_nonlinear() -> ProblemSpec {
    with_terminal(
        "separated_drift",
        TerminalParams {
            linear: vec![0.6],
            sin: Some(sdgj::problem::SinTerm { amp: 0.3, freq: 1.0 }),
            ..TerminalParams::default()
        },
        None,
    )
}
