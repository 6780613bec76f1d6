use std::path::PathBuf;

use proptest::prelude::*;

use sdgj::problem::{
    parse_problem, parse_problem_str, scenario, validate_hypotheses, AffineParams, CoefficientFamily, ControlSet,
    DriverParams, ProbeConfig, ProblemSpec, SinTerm, TerminalParams, SCENARIOS,
};
use sdgj::Error;

fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn canonical_file_echoes_its_definition() {
    let spec = parse_problem(workspace().join("docs/separated_drift.json")).unwrap();
    let co = spec.coefficients.as_ref();
    let mut out = [0.0];
    for &u in &[-1.0, 0.5] {
        for &v in &[0.0, 1.0] {
            co.drift(0.3, &[2.0], &[u], &[v], &mut out);
            assert_eq!(out[0], u - v);
        }
    }
    co.diffusion(0.0, &[1.0], &[0.0], &[0.0], &mut out);
    assert_eq!(out[0], 0.3);
    co.jump(0.0, &[1.0], &[0.0], &[0.0], &[-0.5], &mut out);
    assert_eq!(out[0], 0.2 * -0.5);
    assert_eq!(co.driver(0.0, &[1.0], 2.0, &[3.0], 4.0, &[1.0], &[-1.0]), 0.0);
    assert_eq!(spec.terminal(&[1.25]), 1.25);
    let five = ControlSet::scalar("U", &[-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
    assert_eq!(spec.u_set.len(), 5);
    for i in 0..5 {
        assert_eq!(spec.u_set.point(i), five.point(i));
        assert_eq!(spec.v_set.point(i), five.point(i));
    }
}

#[test]
fn shipped_scenario_files_match_the_registry() {
    for name in SCENARIOS {
        let path = workspace().join(format!("scenarios/{name}.json"));
        let text = std::fs::read_to_string(&path).unwrap();
        let registry = scenario(name).unwrap();
        assert_eq!(text.trim_end(), registry.to_json().unwrap(), "{name}");
        let parsed = parse_problem(&path).unwrap();
        assert_eq!(parsed.to_document().unwrap(), registry.to_document().unwrap());
    }
    let doc = std::fs::read_to_string(workspace().join("docs/separated_drift.json")).unwrap();
    assert_eq!(doc, std::fs::read_to_string(workspace().join("scenarios/separated_drift.json")).unwrap());
}

#[test]
fn schema_errors_name_their_pointer() {
    let text = scenario("jump_heavy").unwrap().to_json().unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc.as_object_mut().unwrap().remove("levy");
    match parse_problem_str(&doc.to_string()) {
        Err(Error::Parse { pointer, .. }) => assert_eq!(pointer, "/levy"),
        other => panic!("{other:?}"),
    }
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["horizon"] = serde_json::json!("one");
    match parse_problem_str(&doc.to_string()) {
        Err(Error::Parse { pointer, .. }) => assert_eq!(pointer, "/horizon"),
        other => panic!("{other:?}"),
    }
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["coefficients"]["family"] = serde_json::json!("no_such_family");
    assert!(matches!(parse_problem_str(&doc.to_string()), Err(Error::Config(_))));
}

#[test]
fn validator_flags_a_decreasing_k_dependence() {
    let mut spec = scenario("jump_heavy").unwrap();
    let mut params = spec.family.clone().unwrap().to_affine(spec.dims).unwrap();
    params.driver.ck = -0.5;
    spec = ProblemSpec::from_family(
        CoefficientFamily::Affine(params),
        spec.dims,
        spec.horizon,
        spec.lipschitz_c,
        spec.rho_scale,
        spec.u_set.clone(),
        spec.v_set.clone(),
        spec.levy.clone(),
    )
    .unwrap();
    let report = validate_hypotheses(&spec, &ProbeConfig::default());
    let failures: Vec<&str> = report.failures().iter().map(|c| c.clause.as_str()).collect();
    assert_eq!(failures, ["f nondecreasing in k"]);
}

fn affine_strategy() -> impl Strategy<Value = AffineParams> {
    (
        -1.0f64..1.0,
        -0.5f64..0.5,
        0.0f64..0.5,
        -0.5f64..0.5,
        0.0f64..0.5,
        -0.4f64..0.4,
        0.0f64..0.3,
    )
        .prop_map(|(b0, bx, s0, cy, ck, lin, amp)| {
            let base = scenario("separated_drift").unwrap();
            let mut p = base.family.clone().unwrap().to_affine(base.dims).unwrap();
            p.b0 = vec![b0];
            p.bx = vec![vec![bx]];
            p.s0 = vec![vec![s0]];
            p.driver = DriverParams {
                cy,
                ck,
                ..DriverParams::default()
            };
            p.terminal = TerminalParams {
                linear: vec![lin],
                sin: Some(SinTerm { amp, freq: 1.0 }),
                ..TerminalParams::default()
            };
            p
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parse_inverts_serialize(params in affine_strategy(), horizon in 0.1f64..3.0) {
        let base = scenario("separated_drift").unwrap();
        let spec = ProblemSpec::from_family(
            CoefficientFamily::Affine(params),
            base.dims,
            horizon,
            base.lipschitz_c,
            base.rho_scale,
            base.u_set.clone(),
            base.v_set.clone(),
            base.levy.clone(),
        )
        .unwrap();
        let text = spec.to_json().unwrap();
        let back = parse_problem_str(&text).unwrap();
        prop_assert_eq!(back.to_document().unwrap(), spec.to_document().unwrap());
        prop_assert_eq!(back.to_json().unwrap(), text);
        prop_assert_eq!(back.terminal(&[0.7]), spec.terminal(&[0.7]));
    }
}
