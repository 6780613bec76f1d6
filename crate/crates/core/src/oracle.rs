//! Exact reference on tiny instances: the full outcome tree of the
//! quadrature-discretized noise, walked without any interpolation.
//!
//! The tree uses the same Euler update, quadrature and backward step as the
//! grid solvers, so any disagreement isolates interpolation or bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ControlPolicy, PolicyContext};
use crate::levy_paths::TimeGrid;
use crate::problem::ProblemSpec;
use crate::step::{
    backward_step, check_step_size, implicit_update, moments_from_children, StepCoefficients, StepRule,
    StepValue,
};

pub const MAX_TREE_STEPS: usize = 12;
pub const MAX_TREE_ATOMS: usize = 3;
pub const MAX_TREE_GAUSS: usize = 3;
pub const MAX_TREE_NODES: f64 = 1e6;
pub const MAX_CONTROL_PAIRS: usize = 100;
pub const MAX_DUMP_NODES: usize = 10_000;
pub const TREE_TOLERANCE: f64 = 1e-15;

/// Lower (`max_u min_v`) or upper (`min_v max_u`) value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Lower,
    Upper,
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Which::Lower => "lower",
            Which::Upper => "upper",
        }
    }
}

impl std::str::FromStr for Which {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lower" => Ok(Which::Lower),
            "upper" => Ok(Which::Upper),
            other => Err(Error::Config(format!("expected lower|upper, got {other}"))),
        }
    }
}

/// Solves the finite matrix game `payoff[u][v]`.
///
/// Returns the value and the selected `(u, v)`; ties go to the lowest index.
/// For the lower value the outer player is `u`, and the reported `v` is the
/// best response to the selected `u`; symmetrically for the upper value.
pub fn matrix_game(payoff: &[f64], nu: usize, nv: usize, which: Which) -> (f64, usize, usize) {
    match which {
        Which::Lower => {
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for u in 0..nu {
                let row = &payoff[u * nv..(u + 1) * nv];
                let (mut inner, mut arg) = (f64::INFINITY, 0);
                for (v, val) in row.iter().enumerate() {
                    if *val < inner {
                        inner = *val;
                        arg = v;
                    }
                }
                if inner > best.0 {
                    best = (inner, u, arg);
                }
            }
            best
        }
        Which::Upper => {
            let mut best = (f64::INFINITY, 0, 0);
            for v in 0..nv {
                let (mut inner, mut arg) = (f64::NEG_INFINITY, 0);
                for u in 0..nu {
                    let val = payoff[u * nv + v];
                    if val > inner {
                        inner = val;
                        arg = u;
                    }
                }
                if inner < best.0 {
                    best = (inner, arg, v);
                }
            }
            best
        }
    }
}

/// Node count `Σ_{j=1..depth} b^j` of a tree with branching `b`.
pub fn tree_node_count(branching: usize, depth: usize) -> f64 {
    (1..=depth).map(|j| (branching as f64).powi(j as i32)).sum()
}

/// Information handed to a visitor at every internal tree node.
pub struct NodeVisit<'a> {
    pub step: usize,
    pub time: f64,
    pub state: &'a [f64],
    /// Probability of reaching this node from the root.
    pub prob: f64,
    pub u: usize,
    pub v: usize,
    /// One backward-step result per solved problem.
    pub values: &'a [StepValue],
}

/// Exact backward recursions on the outcome tree.
pub struct TreeSolver<'a> {
    pub spec: &'a ProblemSpec,
    pub grid: TimeGrid,
    pub rule: StepRule,
    pub tol: f64,
}

impl<'a> TreeSolver<'a> {
    pub fn new(spec: &'a ProblemSpec, grid: TimeGrid, gauss: usize) -> Result<Self> {
        if grid.n_steps > MAX_TREE_STEPS {
            return Err(Error::SizeLimit(format!(
                "tree depth {} exceeds {MAX_TREE_STEPS}",
                grid.n_steps
            )));
        }
        if spec.levy.len() > MAX_TREE_ATOMS {
            return Err(Error::SizeLimit(format!(
                "{} atoms exceed the tree limit {MAX_TREE_ATOMS}",
                spec.levy.len()
            )));
        }
        if gauss > MAX_TREE_GAUSS {
            return Err(Error::SizeLimit(format!(
                "tree quadrature order {gauss} exceeds {MAX_TREE_GAUSS}"
            )));
        }
        check_step_size(spec, grid.dt())?;
        let rule = StepRule::new(&spec.levy, spec.d(), gauss, grid.dt())?;
        let nodes = tree_node_count(rule.branching(), grid.n_steps);
        if nodes > MAX_TREE_NODES {
            return Err(Error::SizeLimit(format!(
                "outcome tree would have {nodes:.3e} nodes (limit {MAX_TREE_NODES:.0e})"
            )));
        }
        Ok(Self {
            spec,
            grid,
            rule,
            tol: TREE_TOLERANCE,
        })
    }

    pub fn node_count(&self) -> f64 {
        tree_node_count(self.rule.branching(), self.grid.n_steps)
    }

    /// Solves several BSDEs at once on the tree of `self.spec`'s forward
    /// dynamics. Every spec contributes its own driver; `terminals[s]` is the
    /// terminal datum of problem `s`. Returns the root values.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_bsde(
        &self,
        specs: &[&ProblemSpec],
        terminals: &[&dyn Fn(&[f64]) -> f64],
        u_policy: &dyn ControlPolicy,
        v_policy: &dyn ControlPolicy,
        start_step: usize,
        x: &[f64],
        visit: &mut dyn FnMut(&NodeVisit<'_>),
    ) -> Result<Vec<StepValue>> {
        if specs.len() != terminals.len() || specs.is_empty() {
            return Err(Error::Config("multi_bsde needs one terminal per problem".into()));
        }
        if start_step >= self.grid.n_steps {
            return Err(Error::Domain(format!("start step {start_step} is not before the horizon")));
        }
        self.multi_node(specs, terminals, u_policy, v_policy, start_step, x, 1.0, visit)
    }

    #[allow(clippy::too_many_arguments)]
    fn multi_node(
        &self,
        specs: &[&ProblemSpec],
        terminals: &[&dyn Fn(&[f64]) -> f64],
        u_policy: &dyn ControlPolicy,
        v_policy: &dyn ControlPolicy,
        k: usize,
        x: &[f64],
        prob: f64,
        visit: &mut dyn FnMut(&NodeVisit<'_>),
    ) -> Result<Vec<StepValue>> {
        let t = self.grid.time(k);
        let ctx = PolicyContext {
            step: k,
            time: t,
            state: x,
            opponent: None,
            bundle: None,
        };
        if u_policy.reacts() || v_policy.reacts() {
            return Err(Error::Config("tree BSDE solves need feedback policies".into()));
        }
        let (ui, vi) = (u_policy.select(&ctx), v_policy.select(&ctx));
        if ui >= self.spec.u_set.len() || vi >= self.spec.v_set.len() {
            return Err(Error::Config("policy index out of range".into()));
        }
        let u = self.spec.u_set.point(ui);
        let v = self.spec.v_set.point(vi);
        let coeffs = StepCoefficients::new(self.spec, t, x, u, v, self.rule.dt)?;
        let nq = self.rule.rule.len();
        let na = self.rule.n_alternatives();
        let ns = specs.len();
        let mut children = vec![vec![0.0; nq * na]; ns];
        let mut state = vec![0.0; self.spec.n()];
        for alt in 0..na {
            for q in 0..nq {
                self.rule.child(&coeffs, q, alt, &mut state);
                let child_prob = prob * self.rule.child_prob(q, alt);
                if k + 1 == self.grid.n_steps {
                    for s in 0..ns {
                        children[s][alt * nq + q] = terminals[s](&state);
                    }
                } else {
                    let vals = self.multi_node(specs, terminals, u_policy, v_policy, k + 1, &state, child_prob, visit)?;
                    for s in 0..ns {
                        children[s][alt * nq + q] = vals[s].y;
                    }
                }
            }
        }
        let mut values = Vec::with_capacity(ns);
        for s in 0..ns {
            let moments = moments_from_children(&self.rule, &children[s]);
            values.push(implicit_update(specs[s], t, x, u, v, self.rule.dt, moments, self.tol)?);
        }
        visit(&NodeVisit {
            step: k,
            time: t,
            state: x,
            prob,
            u: ui,
            v: vi,
            values: &values,
        });
        Ok(values)
    }

    /// BSDE value at `(start_step, x)` for one problem.
    pub fn bsde(
        &self,
        u_policy: &dyn ControlPolicy,
        v_policy: &dyn ControlPolicy,
        terminal: &dyn Fn(&[f64]) -> f64,
        start_step: usize,
        x: &[f64],
    ) -> Result<StepValue> {
        let mut vals = self.multi_bsde(&[self.spec], &[terminal], u_policy, v_policy, start_step, x, &mut |_| {})?;
        Ok(vals.remove(0))
    }

    /// Game value at `(k, x)` with continuation `terminal` at `end_step`.
    pub fn game(
        &self,
        which: Which,
        terminal: &dyn Fn(&[f64]) -> f64,
        k: usize,
        end_step: usize,
        x: &[f64],
    ) -> Result<GameNode> {
        let nu = self.spec.u_set.len();
        let nv = self.spec.v_set.len();
        if nu * nv > MAX_CONTROL_PAIRS {
            return Err(Error::SizeLimit(format!(
                "{nu}x{nv} control pairs exceed the tree limit {MAX_CONTROL_PAIRS}"
            )));
        }
        if k >= end_step || end_step > self.grid.n_steps {
            return Err(Error::Domain(format!("invalid step range {k}..{end_step}")));
        }
        let t = self.grid.time(k);
        let mut payoff = vec![0.0; nu * nv];
        for ui in 0..nu {
            for vi in 0..nv {
                let val = backward_step(
                    self.spec,
                    &self.rule,
                    t,
                    x,
                    self.spec.u_set.point(ui),
                    self.spec.v_set.point(vi),
                    self.tol,
                    |child| {
                        if k + 1 == end_step {
                            Ok(terminal(child))
                        } else {
                            Ok(self.game(which, terminal, k + 1, end_step, child)?.value)
                        }
                    },
                )?;
                payoff[ui * nv + vi] = val.y;
            }
        }
        let (value, u, v) = matrix_game(&payoff, nu, nv, which);
        Ok(GameNode { value, u, v, payoff })
    }
}

/// Result of the step-local game at one tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameNode {
    pub value: f64,
    pub u: usize,
    pub v: usize,
    /// Row-major `|U| x |V|` one-step values.
    pub payoff: Vec<f64>,
}

/// Tree size and root data of an oracle solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub x0: Vec<f64>,
    pub t0: f64,
    pub n_steps: usize,
    pub gauss: usize,
}

impl TreeParams {
    pub fn grid(&self, spec: &ProblemSpec) -> Result<TimeGrid> {
        TimeGrid::new(self.t0, spec.horizon, self.n_steps)
    }
}

/// Exact `(Y, Z, K̄)` at the root for feedback policies.
pub fn oracle_bsde(
    spec: &ProblemSpec,
    params: &TreeParams,
    u_policy: &dyn ControlPolicy,
    v_policy: &dyn ControlPolicy,
    terminal: &dyn Fn(&[f64]) -> f64,
) -> Result<StepValue> {
    let solver = TreeSolver::new(spec, params.grid(spec)?, params.gauss)?;
    solver.bsde(u_policy, v_policy, terminal, 0, &params.x0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleGame {
    pub which: Which,
    pub value: f64,
    pub u: usize,
    pub v: usize,
    /// The opponent's best reply to each of the outer player's controls at
    /// the root: `reaction[u] = v` for the lower value, `reaction[v] = u` for
    /// the upper value.
    pub reaction: Vec<usize>,
    pub payoff: Vec<f64>,
}

/// Exhaustive max-min or min-max over the tree with terminal `Φ`.
pub fn oracle_game(spec: &ProblemSpec, params: &TreeParams, which: Which) -> Result<OracleGame> {
    let solver = TreeSolver::new(spec, params.grid(spec)?, params.gauss)?;
    let phi = |x: &[f64]| spec.terminal(x);
    let root = solver.game(which, &phi, 0, params.n_steps, &params.x0)?;
    let nu = spec.u_set.len();
    let nv = spec.v_set.len();
    let reaction = match which {
        Which::Lower => (0..nu)
            .map(|u| matrix_game(&root.payoff[u * nv..(u + 1) * nv], 1, nv, Which::Lower).2)
            .collect(),
        Which::Upper => (0..nv)
            .map(|v| {
                let col: Vec<f64> = (0..nu).map(|u| root.payoff[u * nv + v]).collect();
                matrix_game(&col, nu, 1, Which::Upper).1
            })
            .collect(),
    };
    Ok(OracleGame {
        which,
        value: root.value,
        u: root.u,
        v: root.v,
        reaction,
        payoff: root.payoff,
    })
}

/// One node of an explicit outcome tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub depth: usize,
    pub quad_point: usize,
    /// 0 = no jump, `i + 1` = atom `i`.
    pub jump_alt: usize,
    /// Probability of this branch given the parent.
    pub branch_prob: f64,
    /// Probability of reaching the node from the root.
    pub prob: f64,
    pub state: Vec<f64>,
}

/// Explicit tree of states reached under fixed feedback policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTree {
    pub depth: usize,
    pub branching: usize,
    pub nodes: Vec<TreeNode>,
}

impl OutcomeTree {
    pub fn build(
        spec: &ProblemSpec,
        params: &TreeParams,
        u_policy: &dyn ControlPolicy,
        v_policy: &dyn ControlPolicy,
    ) -> Result<Self> {
        let solver = TreeSolver::new(spec, params.grid(spec)?, params.gauss)?;
        let rule = &solver.rule;
        let grid = solver.grid;
        let mut nodes = vec![TreeNode {
            parent: None,
            depth: 0,
            quad_point: 0,
            jump_alt: 0,
            branch_prob: 1.0,
            prob: 1.0,
            state: params.x0.clone(),
        }];
        let mut frontier = vec![0usize];
        let mut state = vec![0.0; spec.n()];
        for k in 0..grid.n_steps {
            let t = grid.time(k);
            let mut next = Vec::with_capacity(frontier.len() * rule.branching());
            for &id in &frontier {
                let x = nodes[id].state.clone();
                let ctx = PolicyContext {
                    step: k,
                    time: t,
                    state: &x,
                    opponent: None,
                    bundle: None,
                };
                let (ui, vi) = (u_policy.select(&ctx), v_policy.select(&ctx));
                let coeffs = StepCoefficients::new(spec, t, &x, spec.u_set.point(ui), spec.v_set.point(vi), rule.dt)?;
                for alt in 0..rule.n_alternatives() {
                    for q in 0..rule.rule.len() {
                        rule.child(&coeffs, q, alt, &mut state);
                        next.push(nodes.len());
                        nodes.push(TreeNode {
                            parent: Some(id),
                            depth: k + 1,
                            quad_point: q,
                            jump_alt: alt,
                            branch_prob: rule.child_prob(q, alt),
                            prob: nodes[id].prob * rule.child_prob(q, alt),
                            state: state.clone(),
                        });
                    }
                }
            }
            frontier = next;
        }
        Ok(Self {
            depth: grid.n_steps,
            branching: rule.branching(),
            nodes,
        })
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(move |n| n.depth == self.depth)
    }

    /// Total probability of the leaves.
    pub fn leaf_mass(&self) -> f64 {
        // Summed per parent first so rounding stays at the level of one step.
        let mut mass = vec![0.0; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if n.depth == self.depth {
                mass[i] = 1.0;
            }
        }
        for i in (1..self.nodes.len()).rev() {
            let n = &self.nodes[i];
            let m = mass[i];
            mass[n.parent.unwrap_or(0)] += n.branch_prob * m;
        }
        mass[0]
    }

    /// JSON dump for inspection, refused above the node cap.
    pub fn to_json(&self) -> Result<String> {
        if self.nodes.len() > MAX_DUMP_NODES {
            return Err(Error::SizeLimit(format!(
                "tree has {} nodes; dumps are capped at {MAX_DUMP_NODES}",
                self.nodes.len()
            )));
        }
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::ConstantPolicy;
    use crate::problem::scenario;
    use approx::assert_abs_diff_eq;

    fn params(n_steps: usize) -> TreeParams {
        TreeParams {
            x0: vec![0.3],
            t0: 0.0,
            n_steps,
            gauss: 3,
        }
    }

    #[test]
    fn matrix_game_orders_and_ties() {
        // Matching pennies: max min = -1, min max = 1.
        let pay = [1.0, -1.0, -1.0, 1.0];
        assert_eq!(matrix_game(&pay, 2, 2, Which::Lower).0, -1.0);
        assert_eq!(matrix_game(&pay, 2, 2, Which::Upper).0, 1.0);
        let flat = [0.0; 4];
        let (_, u, v) = matrix_game(&flat, 2, 2, Which::Lower);
        assert_eq!((u, v), (0, 0));
    }

    #[test]
    fn zero_dynamics_root_is_phi() {
        let spec = scenario("zero_dynamics").unwrap();
        let phi = |x: &[f64]| spec.terminal(x);
        let y = oracle_bsde(&spec, &params(5), &ConstantPolicy(0), &ConstantPolicy(0), &phi).unwrap();
        assert_eq!(y.y, 0.3);
        let late = TreeParams {
            t0: 0.6,
            ..params(2)
        };
        let g = oracle_game(&spec, &late, Which::Lower).unwrap();
        assert_eq!(g.value, 0.3);
    }

    #[test]
    fn leaf_mass_is_one() {
        let spec = scenario("jump_heavy").unwrap();
        let p = TreeParams {
            t0: 0.7,
            ..params(5)
        };
        let tree = OutcomeTree::build(&spec, &p, &ConstantPolicy(1), &ConstantPolicy(2)).unwrap();
        assert_eq!(tree.leaves().count(), 9usize.pow(5));
        assert_abs_diff_eq!(tree.leaf_mass(), 1.0, epsilon = 1e-14);
        // compensated sum; a naive sum over 9^5 leaves drifts by ~1e-12
        let (mut direct, mut carry) = (0.0f64, 0.0f64);
        for p in tree.leaves().map(|n| n.prob) {
            let t = direct + p;
            carry += if direct.abs() >= p.abs() { (direct - t) + p } else { (p - t) + direct };
            direct = t;
        }
        assert_abs_diff_eq!(direct + carry, 1.0, epsilon = 1e-14);
        assert!(tree.to_json().is_err());
    }

    #[test]
    fn size_limits_refuse() {
        let spec = scenario("separated_drift").unwrap();
        assert!(matches!(
            TreeSolver::new(&spec, TimeGrid::new(0.0, 1.0, 13).unwrap(), 3),
            Err(Error::SizeLimit(_))
        ));
        assert!(matches!(
            TreeSolver::new(&spec, TimeGrid::new(0.0, 1.0, 10).unwrap(), 3),
            Err(Error::SizeLimit(_))
        ));
    }
}
