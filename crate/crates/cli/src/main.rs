use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sdgj::bsde::{solve_bsde, write_solution_csv, Engine};
use sdgj::export::{write_dump, Dump};
use sdgj::forward::{moment_check, simulate, write_trajectory_csv, ContextPolicy};
use sdgj::game::{replay_discrepancy, solve_value, write_value_csv, ValueField};
use sdgj::grid::{FnField, GridField, StateGrid};
use sdgj::levy_paths::{sample_paths, write_bundles_csv, TimeGrid};
use sdgj::oracle::Which;
use sdgj::pide::{cfl_steps, isaacs_gap, solve_pide, write_pide_csv, PideScheme};
use sdgj::problem::{parse_problem, scenario, validate_hypotheses, ProbeConfig, ProblemSpec};
use sdgj::verify::{refine_ladder, report_render, run_verify, write_refine_csv, VerifyConfig};
use sdgj::{Error, Result};

#[derive(Parser)]
#[command(name = "sdgj", version, about = "Solvers and checks for zero-sum stochastic differential games with jumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample noise, simulate the game under the discrete equilibrium feedback, and estimate moments.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trajectories written to CSV.
        #[arg(long, default_value_t = 10)]
        paths: usize,
    },
    /// Backward solve of the BSDE under the discrete equilibrium feedback.
    SolveBsde(Common),
    /// Lower or upper value by dynamic programming.
    SolveGame(Common),
    /// Lower or upper value from the explicit scheme for the Isaacs equation.
    SolvePide(Common),
    /// Run the full property suite and write a manifest.
    Verify(Common),
    /// Cross-solver refinement ladder.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        rungs: usize,
    },
    /// Render a verify manifest as a table.
    Report {
        /// Path of `manifest.json`.
        manifest: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Lower,
    Upper,
}

impl From<WhichArg> for Which {
    fn from(w: WhichArg) -> Self {
        match w {
            WhichArg::Lower => Which::Lower,
            WhichArg::Upper => Which::Upper,
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// Problem file, or the name of a built-in scenario.
    #[arg(long)]
    problem: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Time steps (the PIDE uses at least the CFL count).
    #[arg(long, default_value_t = 16)]
    steps: usize,
    /// Nodes per state axis.
    #[arg(long, default_value_t = 25)]
    xnodes: usize,
    /// Half width of the state box.
    #[arg(long, default_value_t = 3.0)]
    xbox: f64,
    #[arg(long, default_value_t = sdgj::bsde::DEFAULT_GAUSS)]
    gauss: usize,
    #[arg(long, default_value_t = sdgj::pide::DEFAULT_CFL)]
    cfl: f64,
    #[arg(long, value_enum, default_value_t = WhichArg::Lower)]
    which: WhichArg,
    /// Run even if hypothesis validation fails.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<(ProblemSpec, String)> {
        let path = Path::new(&self.problem);
        if path.exists() {
            let name = path.file_stem().map_or("problem".into(), |s| s.to_string_lossy().into_owned());
            Ok((parse_problem(path)?, name))
        } else {
            Ok((scenario(&self.problem)?, self.problem.clone()))
        }
    }

    fn check(&self) -> Result<()> {
        if self.steps == 0 || self.xnodes < 2 || !(self.xbox > 0.0) || self.gauss == 0 {
            return Err(Error::Config("steps, xnodes, xbox and gauss must be positive (xnodes >= 2)".into()));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::Config(format!("--cfl {} outside (0, 1]", self.cfl)));
        }
        Ok(())
    }

    /// Loads the problem, refusing it on failed hypotheses unless forced.
    fn prepare(&self) -> Result<(ProblemSpec, String)> {
        self.check()?;
        let (spec, name) = self.load()?;
        let report = validate_hypotheses(
            &spec,
            &ProbeConfig {
                seed: self.seed,
                ..ProbeConfig::default()
            },
        );
        if !report.passed() {
            let names: Vec<String> = report
                .failures()
                .iter()
                .map(|c| format!("{} (statistic {:.4}, bound {:.4}, at {})", c.clause, c.statistic, c.threshold, c.witness))
                .collect();
            if !self.force {
                return Err(Error::Validation(format!("hypothesis clauses failed: {}", names.join("; "))));
            }
            eprintln!("warning: continuing despite failed clauses: {}", names.join("; "));
        }
        fs::create_dir_all(&self.out)?;
        Ok((spec, name))
    }

    fn grids(&self, spec: &ProblemSpec) -> Result<(TimeGrid, StateGrid)> {
        Ok((
            TimeGrid::new(0.0, spec.horizon, self.steps)?,
            StateGrid::cube(spec.n(), self.xbox, self.xnodes)?,
        ))
    }

    fn verify_config(&self) -> VerifyConfig {
        VerifyConfig {
            seed: self.seed,
            steps: self.steps,
            xnodes: self.xnodes,
            xbox: self.xbox,
            gauss: self.gauss,
            cfl: self.cfl,
            ..VerifyConfig::default()
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Feedback pair read from a solved value field at the nearest node.
fn equilibrium_policies(field: &ValueField) -> (impl sdgj::forward::ControlPolicy + '_, impl sdgj::forward::ControlPolicy + '_) {
    (
        ContextPolicy::new(move |ctx| field.controls_near(ctx.step, ctx.state).0),
        ContextPolicy::new(move |ctx| field.controls_near(ctx.step, ctx.state).1),
    )
}

fn origin(spec: &ProblemSpec) -> Vec<f64> {
    vec![0.0; spec.n()]
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { common, paths } => {
            let (spec, name) = common.prepare()?;
            let (grid, sgrid) = common.grids(&spec)?;
            let field = solve_value(&spec, common.which.into(), &grid, &sgrid, &Engine::grid(common.gauss))?;
            let (u, v) = equilibrium_policies(&field);
            let bundles = sample_paths(&spec.levy, &grid, spec.d(), paths.max(1), common.seed)?;
            write_bundles_csv(&bundles, create(&common.out, "bundles.csv")?)?;
            let dir = common.out.join("trajectories");
            fs::create_dir_all(&dir)?;
            let x0 = origin(&spec);
            for (p, b) in bundles.iter().enumerate() {
                let traj = simulate(&spec, b, &x0, &u, &v)?;
                write_trajectory_csv(&spec, &traj, create(&dir, &format!("path_{p:04}.csv"))?)?;
            }
            let mut x1 = x0.clone();
            x1[0] += 0.1;
            let moments = moment_check(&spec, common.steps, &x0, &x1, 1000, common.seed)?;
            write_json(&common.out, "moments.json", &serde_json::to_value(&moments)?)?;
            write_json(
                &common.out,
                "summary.json",
                &json!({"problem": name, "paths": bundles.len(), "steps": grid.n_steps, "moments": moments}),
            )?;
            println!("wrote {} trajectories to {}", bundles.len(), dir.display());
            Ok(true)
        }
        Command::SolveBsde(common) => {
            let (spec, name) = common.prepare()?;
            let (grid, sgrid) = common.grids(&spec)?;
            let engine = Engine::grid(common.gauss);
            let field = solve_value(&spec, common.which.into(), &grid, &sgrid, &engine)?;
            let (u, v) = equilibrium_policies(&field);
            let phi = FnField(|x: &[f64]| spec.terminal(x));
            let sol = solve_bsde(&spec, &grid, &sgrid, &u, &v, &phi, &engine)?;
            write_solution_csv(&sol, create(&common.out, "bsde.csv")?)?;
            write_dump(&Dump::from(&sol), create(&common.out, "bsde.bin")?)?;
            let x0 = origin(&spec);
            let summary = json!({
                "problem": name,
                "steps": grid.n_steps,
                "nodes": sgrid.len(),
                "y0_at_origin": sol.y_at(0, &x0),
                "z0_at_origin": sol.z_at(0, &x0),
                "k_bar0_at_origin": sol.k_bar_at(0, &x0),
                "value_at_origin": field.value_at(0, &x0),
            });
            write_json(&common.out, "summary.json", &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(true)
        }
        Command::SolveGame(common) => {
            let (spec, name) = common.prepare()?;
            let (grid, sgrid) = common.grids(&spec)?;
            let engine = Engine::grid(common.gauss);
            let field = solve_value(&spec, common.which.into(), &grid, &sgrid, &engine)?;
            write_value_csv(&field, create(&common.out, "value.csv")?)?;
            write_dump(&Dump::from(&field), create(&common.out, "value.bin")?)?;
            let summary = json!({
                "problem": name,
                "which": field.which,
                "steps": grid.n_steps,
                "nodes": sgrid.len(),
                "value_at_origin": field.value_at(0, &origin(&spec)),
                "replay_discrepancy": replay_discrepancy(&spec, &field, &engine)?,
                "step_game_gap": field.step_gap,
            });
            write_json(&common.out, "summary.json", &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(true)
        }
        Command::SolvePide(common) => {
            let (spec, name) = common.prepare()?;
            let sgrid = StateGrid::cube(spec.n(), common.xbox, common.xnodes)?;
            let steps = cfl_steps(&spec, 0.0, &sgrid, 0.0, common.cfl)?.max(common.steps);
            let scheme = PideScheme {
                grid: TimeGrid::new(0.0, spec.horizon, steps)?,
                sgrid: sgrid.clone(),
                delta_j: 0.0,
                cfl_target: common.cfl,
            };
            let sol = solve_pide(&spec, common.which.into(), &scheme)?;
            write_pide_csv(&sol, create(&common.out, "pide.csv")?)?;
            write_dump(&Dump::from(&sol), create(&common.out, "pide.bin")?)?;
            let probe = GridField {
                grid: &sgrid,
                values: &sol.values[0],
            };
            let gap = isaacs_gap(&spec, &scheme.grid, &sgrid, &probe, 0.0)?;
            fs::write(common.out.join("isaacs_gap.json"), gap.to_json()? + "\n")?;
            let summary = json!({
                "problem": name,
                "which": sol.which,
                "steps": steps,
                "cfl": sol.cfl,
                "max_increment": sol.max_increment,
                "value_at_origin": sol.value_at(0, &origin(&spec)),
                "isaacs_max_gap": gap.max_gap,
            });
            write_json(&common.out, "summary.json", &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(true)
        }
        Command::Verify(common) => {
            common.check()?;
            let (spec, name) = common.load()?;
            fs::create_dir_all(&common.out)?;
            let manifest = run_verify(&spec, &name, &common.verify_config(), common.force)?;
            let text = manifest.to_json()?;
            fs::write(common.out.join("manifest.json"), text.clone() + "\n")?;
            print!("{}", report_render(&text)?);
            Ok(manifest.payload.passed)
        }
        Command::Refine { common, rungs } => {
            let (spec, name) = common.prepare()?;
            let ladder = refine_ladder(&spec, common.which.into(), &common.verify_config(), rungs)?;
            write_refine_csv(&ladder, create(&common.out, "refine.csv")?)?;
            let distances: Vec<f64> = ladder.iter().map(|r| r.distance).collect();
            let monotone = sdgj::game::decreasing(distances.iter().copied());
            println!("{name}: cross-solver distances {distances:?}, decreasing: {monotone}");
            Ok(monotone)
        }
        Command::Report { manifest } => {
            let text = fs::read_to_string(&manifest)?;
            print!("{}", report_render(&text)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("sdgj: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
