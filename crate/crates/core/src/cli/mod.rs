//! Command-line front end.
//!
//! Every run is described by a [`RunConfig`], read from an optional JSON
//! file and then overridden by flags. Results go to a CSV table and a JSON
//! report; identical configurations give byte-identical files.

mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use report::{emit_report, parse_csv, render_csv, render_json, CSV_HEADER};

use crate::error::{Error, Result};
use crate::experiments::{
    build_car_problem, build_mpc_problem, build_qp_example, car_solver_options, closed_loop_finite_difference, log_grid,
    mpc_parameter, propagate_sensitivities, rho_grid_search, simulate_closed_loop, CarProblemConfig,
    ExperimentReport, MpcConfig, ReportRow, NOMINAL_MPC_THETA,
};
use crate::model::{PrimalDualPoint, DEFAULT_ACTIVITY_TOLERANCE};
use crate::oracle::{compare_matrices, FdOptions};
use crate::sqp::{solve, SolveTrace, SolverOptions};

pub const SIGN_NOTE: &str = "all Jacobians are true derivatives dx/dtheta: every linear system is \
solved as M v = -rhs, which matches finite differences of the solution map";
pub const COSINE_NOTE: &str = "cosine similarity of the flattened Jacobians";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Qp,
    Car,
    MpcInstance,
    MpcRollout,
    Sweep,
}

/// Log-spaced grid `count` points from `start` to `stop`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl std::str::FromStr for GridSpec {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected start,stop,count, got {s:?}"));
        }
        let num = |v: &str| v.parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
        Ok(GridSpec {
            start: num(parts[0])?,
            stop: num(parts[1])?,
            count: parts[2].parse().map_err(|e| format!("{:?}: {e}", parts[2]))?,
        })
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("rho grid is empty".into()));
        }
        if !(self.start > 0.0 && self.stop >= self.start && self.stop.is_finite()) {
            return Err(Error::Config(format!(
                "rho grid needs 0 < start <= stop, got {}..{}",
                self.start, self.stop
            )));
        }
        Ok(())
    }
}

/// Full description of one run. Unset options fall back to per-experiment
/// defaults when the run starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub alpha: f64,
    pub theta: Option<f64>,
    pub nodes: usize,
    pub rollout_length: usize,
    pub rho: Option<f64>,
    pub rho_grid: Option<GridSpec>,
    pub fd_step: Option<f64>,
    pub activity_tolerance: f64,
    /// Defaults to [`car_solver_options`] for the car and to
    /// `SolverOptions::default()` otherwise.
    pub solver: Option<SolverOptions>,
    pub out_csv: Option<PathBuf>,
    pub out_json: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: Experiment::Qp,
            alpha: 1.0,
            theta: None,
            nodes: CarProblemConfig::default().n_nodes,
            rollout_length: MpcConfig::default().rollout_length,
            rho: None,
            rho_grid: None,
            fd_step: None,
            activity_tolerance: DEFAULT_ACTIVITY_TOLERANCE,
            solver: None,
            out_csv: None,
            out_json: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn solver_options(&self) -> SolverOptions {
        self.solver.unwrap_or_else(|| match self.experiment {
            Experiment::Car => car_solver_options(),
            _ => SolverOptions::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.solver_options().validate()?;
        if let Some(g) = &self.rho_grid {
            g.validate()?;
        }
        if let Some(r) = self.rho {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::NonPositiveRho(r));
            }
        }
        if let Some(h) = self.fd_step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("fd step must be positive, got {h}")));
            }
        }
        if !(self.activity_tolerance > 0.0) {
            return Err(Error::Config("activity tolerance must be positive".into()));
        }
        if self.experiment == Experiment::Qp && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::NonPositiveAlpha(self.alpha));
        }
        for path in [&self.out_csv, &self.out_json].into_iter().flatten() {
            check_writable(path)?;
        }
        Ok(())
    }

    /// Grid in effect: an explicit scalar, a log grid plus `ρ = 0`, or the
    /// experiment default.
    pub fn rho_values(&self) -> Vec<f64> {
        if let Some(g) = &self.rho_grid {
            let mut v = vec![0.0];
            v.extend(log_grid(g.start, g.stop, g.count));
            return v;
        }
        if let Some(r) = self.rho {
            return vec![r];
        }
        match self.experiment {
            Experiment::Qp => vec![1.0],
            Experiment::Sweep => {
                let mut v = vec![0.0];
                v.extend(log_grid(1e-8, 1e-1, 8));
                v
            }
            Experiment::Car => vec![0.0, 1e-5],
            Experiment::MpcInstance | Experiment::MpcRollout => {
                let mut v = vec![0.0];
                v.extend(log_grid(1e-9, 1e-5, 51));
                v
            }
        }
    }

    pub fn fd_step_value(&self) -> f64 {
        self.fd_step.unwrap_or(match self.experiment {
            Experiment::MpcInstance | Experiment::MpcRollout => 1e-8,
            _ => 1e-5,
        })
    }

    pub fn theta_value(&self) -> f64 {
        self.theta.unwrap_or(match self.experiment {
            Experiment::Car => CarProblemConfig::default().theta,
            Experiment::MpcInstance | Experiment::MpcRollout => NOMINAL_MPC_THETA,
            Experiment::Qp | Experiment::Sweep => self.alpha,
        })
    }
}

fn check_writable(path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !dir.is_dir() {
        return Err(Error::Io(format!("output directory {} does not exist", dir.display())));
    }
    if path.is_dir() {
        return Err(Error::Io(format!("output path {} is a directory", path.display())));
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "nlpsens", version, about = "Sensitivities of parametric NLP solution maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Degenerate equality QP: surrogate Jacobian versus the closed form.
    Qp,
    /// Minimum-time car: surrogate and least squares versus finite differences.
    Car,
    /// ρ grid search on a single MPC instance.
    MpcInstance,
    /// Closed-loop MPC rollout with propagated sensitivities.
    MpcRollout,
    /// ρ sweep on the degenerate QP.
    Sweep,
}

impl Command {
    fn experiment(&self) -> Experiment {
        match self {
            Command::Qp => Experiment::Qp,
            Command::Car => Experiment::Car,
            Command::MpcInstance => Experiment::MpcInstance,
            Command::MpcRollout => Experiment::MpcRollout,
            Command::Sweep => Experiment::Sweep,
        }
    }
}

#[derive(Debug, Default, clap::Args)]
pub struct Flags {
    /// QP curvature α.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Problem parameter θ (car throttle scale, MPC plant coefficient).
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub theta: Option<f64>,
    /// Car collocation nodes N.
    #[arg(long, global = true)]
    pub nodes: Option<usize>,
    /// Closed-loop steps T.
    #[arg(long, global = true)]
    pub rollout_length: Option<usize>,
    /// Single regularization weight.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub rho: Option<f64>,
    /// Log-spaced grid `start,stop,count`; ρ = 0 is always added.
    #[arg(long, global = true)]
    pub rho_grid: Option<GridSpec>,
    #[arg(long, global = true)]
    pub fd_step: Option<f64>,
    #[arg(long, global = true)]
    pub out_csv: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_json: Option<PathBuf>,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// SQP stopping tolerance on the KKT residual.
    #[arg(long, global = true)]
    pub kkt_tol: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

/// Builds the effective configuration: file first, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let f = &cli.flags;
    cfg.experiment = cli.command.experiment();
    if let Some(v) = f.alpha {
        cfg.alpha = v;
    }
    if f.theta.is_some() {
        cfg.theta = f.theta;
    }
    if let Some(v) = f.nodes {
        cfg.nodes = v;
    }
    if let Some(v) = f.rollout_length {
        cfg.rollout_length = v;
    }
    if f.rho.is_some() {
        cfg.rho = f.rho;
        cfg.rho_grid = None;
    }
    if f.rho_grid.is_some() {
        cfg.rho_grid = f.rho_grid;
    }
    if f.fd_step.is_some() {
        cfg.fd_step = f.fd_step;
    }
    if f.out_csv.is_some() {
        cfg.out_csv = f.out_csv.clone();
    }
    if f.out_json.is_some() {
        cfg.out_json = f.out_json.clone();
    }
    if let Some(v) = f.kkt_tol {
        let mut solver = cfg.solver_options();
        solver.kkt_tolerance = v;
        cfg.solver = Some(solver);
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::NonPositiveAlpha(_) | Error::NonPositiveRho(_) => 2,
        Error::Io(_) => 4,
        _ => 3,
    }
}

fn trace_summary(traces: &[SolveTrace]) -> serde_json::Value {
    let worst = traces.iter().map(|t| t.final_kkt_residual).fold(0.0, f64::max);
    json!({
        "solves": traces.len(),
        "total_iterations": traces.iter().map(|t| t.iterations).sum::<usize>(),
        "max_iterations_single_solve": traces.iter().map(|t| t.iterations).max().unwrap_or(0),
        "worst_final_kkt_residual": worst,
        "all_converged": traces.iter().all(SolveTrace::converged),
    })
}

fn fd_options(cfg: &RunConfig) -> FdOptions {
    FdOptions {
        // Trajectory problems move O(1) per unit θ in many coordinates.
        trust_radius_factor: 1e3,
        ..FdOptions::with_step(cfg.fd_step_value())
    }
}

/// Minimum-norm solution of the degenerate QP at `α`, with `ν = −1`.
fn qp_point(alpha: f64) -> Result<(crate::model::ParametricNlp, PrimalDualPoint)> {
    let nlp = build_qp_example(alpha)?;
    let pt = PrimalDualPoint::new(
        &nlp,
        DVector::from_vec(vec![alpha]),
        DVector::from_vec(vec![1.0 / alpha, -0.5 / alpha, -0.5 / alpha]),
        DVector::zeros(0),
        DVector::from_vec(vec![-1.0]),
    )?;
    Ok((nlp, pt))
}

/// Runs the configured experiment and returns its report (no files written).
pub fn execute(cfg: &RunConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let rhos = cfg.rho_values();
    let tol = cfg.activity_tolerance;
    let solver = cfg.solver_options();
    let mut report = match cfg.experiment {
        Experiment::Qp | Experiment::Sweep => {
            let (nlp, pt) = qp_point(cfg.alpha)?;
            let mut r = rho_grid_search(&nlp, &pt, &rhos, &fd_options(cfg), &solver, tol)?;
            if cfg.experiment == Experiment::Qp {
                let jacobians: Vec<_> = rhos
                    .iter()
                    .map(|&rho| {
                        crate::experiments::jacobian_for_rho(&nlp, &pt, rho, tol)
                            .map(|s| json!({"rho": rho, "dx_dtheta": s.dx_dtheta.column(0).as_slice()}))
                    })
                    .collect::<Result<_>>()?;
                r.insert("jacobians", jacobians);
                let a = cfg.alpha;
                r.insert("limit_rho_to_zero", [-1.0 / (a * a), 0.5 / (a * a), 0.5 / (a * a)]);
            }
            r.insert("alpha", cfg.alpha);
            r.insert("solution", pt.x().as_slice());
            r
        }
        Experiment::Car => {
            let car = CarProblemConfig {
                n_nodes: cfg.nodes,
                theta: cfg.theta_value(),
                ..Default::default()
            };
            let nlp = build_car_problem(&car)?;
            let (pt, trace) = solve(&nlp, &DVector::from_vec(vec![car.theta]), None, &solver)?;
            trace.require_converged(None)?;
            let mut r = rho_grid_search(&nlp, &pt, &rhos, &fd_options(cfg), &solver, tol)?;
            r.insert("final_time", pt.x()[pt.x().len() - 1]);
            r.insert("solver_trace", trace_summary(std::slice::from_ref(&trace)));
            r
        }
        Experiment::MpcInstance => {
            let mpc = MpcConfig::default();
            let theta = cfg.theta_value();
            let nlp = build_mpc_problem(mpc.initial_state, theta, &mpc)?;
            let p = mpc_parameter(mpc.initial_state, theta);
            let (pt, trace) = solve(&nlp, &p, None, &solver)?;
            trace.require_converged(None)?;
            let mut r = rho_grid_search(&nlp, &pt, &rhos, &fd_options(cfg), &solver, tol)?;
            r.insert("state", mpc.initial_state);
            r.insert("solver_trace", trace_summary(std::slice::from_ref(&trace)));
            r
        }
        Experiment::MpcRollout => {
            let mpc = MpcConfig {
                rollout_length: cfg.rollout_length,
                ..Default::default()
            };
            let theta = cfg.theta_value();
            let sim = simulate_closed_loop(theta, &mpc, &solver, None)?;
            let fd = closed_loop_finite_difference(&sim, &mpc, cfg.fd_step_value(), &solver)?;
            let reference = fd.flattened_sensitivities();
            let mut r = ExperimentReport::new("mpc-rollout");
            for &rho in &rhos {
                let traj = propagate_sensitivities(&sim, &mpc, rho, tol)?;
                let m = compare_matrices(&traj.flattened_sensitivities(), &reference)?;
                r.rows.push(ReportRow::new(rho, m));
            }
            r.insert("reference", "central finite differences of whole rollouts");
            r.insert("rollout_length", mpc.rollout_length);
            r.insert("final_state", sim.states.last().copied());
            r.insert("solver_trace", trace_summary(&sim.traces));
            r
        }
    };
    report.experiment = serde_json::to_value(cfg.experiment)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    report.insert("config", cfg);
    report.insert("theta", cfg.theta_value());
    report.insert("sign_calibration", SIGN_NOTE);
    report.insert("cosine_convention", COSINE_NOTE);
    report.insert("rho_zero_method", "minimum-norm least squares on the classical system");
    Ok(report)
}

/// Parses `args`, runs, writes outputs and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = resolve_config(&cli).and_then(|cfg| {
        let report = execute(&cfg)?;
        emit_report(&report, cfg.out_csv.as_deref(), cfg.out_json.as_deref())?;
        if cfg.out_csv.is_none() && cfg.out_json.is_none() {
            print!("{}", render_csv(&report)?);
        }
        Ok(())
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", json!({"error": format!("{e:?}"), "message": e.to_string(), "exit_code": code}));
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<RunConfig> {
        let cli = Cli::try_parse_from(std::iter::once("nlpsens").chain(args.iter().copied())).unwrap();
        resolve_config(&cli)
    }

    #[test]
    fn grid_spec_parsing() {
        let g: GridSpec = "1e-9, 1e-5, 51".parse().unwrap();
        assert_eq!(g, GridSpec { start: 1e-9, stop: 1e-5, count: 51 });
        assert!("1,2".parse::<GridSpec>().is_err());
        assert!("a,2,3".parse::<GridSpec>().is_err());
    }

    #[test]
    fn flags_and_validation() {
        let c = parse(&["qp", "--alpha", "2", "--rho", "0.5"]).unwrap();
        assert_eq!((c.alpha, c.rho_values()), (2.0, vec![0.5]));
        let c = parse(&["mpc-instance", "--rho-grid", "1e-9,1e-5,51"]).unwrap();
        assert_eq!(c.rho_values().len(), 52);
        assert_eq!(c.rho_values()[0], 0.0);
        assert_eq!(c.fd_step_value(), 1e-8);
        assert_eq!(c.theta_value(), NOMINAL_MPC_THETA);

        let empty = parse(&["sweep", "--rho-grid", "1e-8,1e-1,0"]).unwrap_err();
        assert_eq!(exit_code(&empty), 2);
        assert_eq!(parse(&["qp", "--alpha", "-1"]).unwrap_err(), Error::NonPositiveAlpha(-1.0));
        assert_eq!(exit_code(&parse(&["qp", "--rho", "-1"]).unwrap_err()), 2);
        let io = parse(&["qp", "--out-csv", "/nonexistent-dir/x.csv"]).unwrap_err();
        assert_eq!(exit_code(&io), 4);
    }

    #[test]
    fn config_file_then_flags() {
        let dir = std::env::temp_dir().join(format!("nlpsens-cli-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.json");
        std::fs::write(&path, r#"{"alpha": 3.0, "rho": 0.25, "solver": {"kkt_tolerance": 1e-9}}"#).unwrap();
        let p = path.to_str().unwrap();
        let c = parse(&["qp", "--config", p]).unwrap();
        assert_eq!((c.alpha, c.rho, c.solver_options().kkt_tolerance), (3.0, Some(0.25), 1e-9));
        let c = parse(&["qp", "--config", p, "--alpha", "4"]).unwrap();
        assert_eq!(c.alpha, 4.0);
        std::fs::write(&path, r#"{"alpah": 3.0}"#).unwrap();
        assert_eq!(exit_code(&parse(&["qp", "--config", p]).unwrap_err()), 2);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn qp_run_reports_closed_form_jacobian() {
        let cfg = RunConfig {
            rho: Some(1.0),
            ..Default::default()
        };
        let r = execute(&cfg).unwrap();
        let j = &r.metadata["jacobians"][0]["dx_dtheta"];
        let expect = [-3.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0];
        for (i, e) in expect.iter().enumerate() {
            assert!((j[i].as_f64().unwrap() - e).abs() < 1e-12);
        }
        assert_eq!(r.experiment, "qp");
        assert_eq!(r.rows.len(), 1);
    }
}
