//! Problem builders and studies: the degenerate QP, minimum-time car
//! trajectory optimization, and MPC of a nonlinear plant.

mod car;
mod mpc;

pub use car::{build_car_problem, car_solver_options, car_state_trajectory, rk4_dilated_step, CarProblemConfig};
pub use mpc::{
    build_mpc_problem, closed_loop_finite_difference, closed_loop_rollout, mpc_parameter, plant,
    propagate_sensitivities, simulate_closed_loop, ClosedLoopSimulation, ClosedLoopTrajectory,
    MpcConfig, MpcLayout, NOMINAL_MPC_THETA,
};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{AutoDiff, Dims, ParametricNlp, PrimalDualPoint, Scalar, SmoothNlp};
use crate::oracle::{compare, finite_difference_jacobian, ComparisonMetrics, FdOptions};
use crate::sensitivity::{least_squares_jacobian, surrogate_jacobian, SensitivityResult};
use crate::sqp::SolverOptions;

/// `min (α/2)x₁² + x₂ + x₃  s.t.  x₁ + x₂ + x₃ = 0` with parameter `α`.
/// Every `x` with `x₁ = 1/α`, `x₂ + x₃ = −1/α` is optimal.
struct DegenerateQp;

impl SmoothNlp for DegenerateQp {
    fn dims(&self) -> Dims {
        Dims {
            n_x: 3,
            n_in: 0,
            n_eq: 1,
            n_theta: 1,
        }
    }
    fn objective<S: Scalar>(&self, x: &[S], theta: &[S]) -> S {
        theta[0] * x[0] * x[0] * 0.5 + x[1] + x[2]
    }
    fn inequalities<S: Scalar>(&self, _x: &[S], _theta: &[S]) -> Vec<S> {
        Vec::new()
    }
    fn equalities<S: Scalar>(&self, x: &[S], _theta: &[S]) -> Vec<S> {
        vec![x[0] + x[1] + x[2]]
    }
}

pub fn build_qp_example(alpha: f64) -> Result<ParametricNlp> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    ParametricNlp::new("degenerate-qp", AutoDiff::<_, 4>::new(DegenerateQp), &[alpha])
}

/// `count` log-spaced values from `start` to `stop`, endpoints exact.
pub fn log_grid(start: f64, stop: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let (a, b) = (start.log10(), stop.log10());
            (0..count)
                .map(|i| {
                    if i == 0 {
                        start
                    } else if i == count - 1 {
                        stop
                    } else {
                        10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64)
                    }
                })
                .collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub rho: f64,
    pub relative_error_inf: f64,
    pub cosine_similarity: f64,
}

impl ReportRow {
    pub fn new(rho: f64, m: ComparisonMetrics) -> Self {
        ReportRow {
            rho,
            relative_error_inf: m.relative_error_inf,
            cosine_similarity: m.cosine_similarity,
        }
    }
}

/// Rows of a ρ study plus free-form metadata (kept in sorted key order).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub rows: Vec<ReportRow>,
    pub metadata: Map<String, Value>,
}

impl ExperimentReport {
    pub fn new(experiment: impl Into<String>) -> Self {
        ExperimentReport {
            experiment: experiment.into(),
            rows: Vec::new(),
            metadata: Map::new(),
        }
    }

    pub fn insert(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.metadata.insert(key.to_string(), v);
    }

    /// Row with the smallest relative error (first on ties).
    pub fn best(&self) -> Option<&ReportRow> {
        self.rows
            .iter()
            .reduce(|a, b| if b.relative_error_inf < a.relative_error_inf { b } else { a })
    }
}

/// Sensitivity by the ρ convention used throughout: surrogate for `ρ > 0`,
/// minimum-norm least squares for `ρ = 0`.
pub fn jacobian_for_rho(
    nlp: &ParametricNlp,
    pt: &PrimalDualPoint,
    rho: f64,
    tolerance: f64,
) -> Result<SensitivityResult> {
    if rho == 0.0 {
        least_squares_jacobian(nlp, pt, tolerance)
    } else {
        surrogate_jacobian(nlp, pt, rho, tolerance)
    }
}

/// Compares the sensitivity at every grid value of `ρ` against one
/// finite-difference reference of the full primal Jacobian.
pub fn rho_grid_search(
    problem: &ParametricNlp,
    pt: &PrimalDualPoint,
    grid: &[f64],
    fd: &FdOptions,
    solver_options: &SolverOptions,
    tolerance: f64,
) -> Result<ExperimentReport> {
    if grid.is_empty() {
        return Err(Error::Config("empty rho grid".into()));
    }
    if let Some(r) = grid.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
        return Err(Error::Config(format!("rho values must be finite and nonnegative, got {r}")));
    }
    let reference = finite_difference_jacobian(problem, pt, fd, solver_options)?;
    let mut report = ExperimentReport::new(format!("rho-sweep:{}", problem.name()));
    for &rho in grid {
        let sens = jacobian_for_rho(problem, pt, rho, tolerance)?;
        report.rows.push(ReportRow::new(rho, compare(&sens, &reference)?));
    }
    report.insert("reference", "central finite differences, warm-started re-solves");
    report.insert("fd_options", fd);
    report.insert("jacobian_shape", [reference.dx_dtheta.nrows(), reference.dx_dtheta.ncols()]);
    Ok(report)
}

#[cfg(test)]
pub(crate) mod tests {
    use nalgebra::{DMatrix, DVector};

    use super::*;
    use crate::model::evaluate_kkt;

    /// Checks every hand-coded derivative against central differences of
    /// the values (and of the Lagrangian gradient for second order).
    pub(crate) fn check_derivatives(nlp: &ParametricNlp, x: &DVector<f64>, theta: &[f64]) {
        let d = nlp.dims();
        let lambda: Vec<f64> = (0..d.n_in).map(|i| 0.3 + 0.1 * (i % 5) as f64).collect();
        let nu: Vec<f64> = (0..d.n_eq).map(|i| ((i as f64) * 0.9).sin()).collect();
        let der = nlp.derivatives(x.as_slice(), theta, &lambda, &nu).unwrap();
        let h = 1e-6;
        let close = |a: f64, b: f64, what: &str| {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{what}: {a} vs {b}");
        };
        let grad_l = |x: &DVector<f64>, t: &[f64]| {
            let dd = nlp.derivatives(x.as_slice(), t, &lambda, &nu).unwrap();
            &dd.objective_gradient
                + dd.inequality_jacobian.transpose() * DVector::from_column_slice(&lambda)
                + dd.equality_jacobian.transpose() * DVector::from_column_slice(&nu)
        };
        let mut hess = DMatrix::zeros(d.n_x, d.n_x);
        for j in 0..d.n_x {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let vp = nlp.values(xp.as_slice(), theta).unwrap();
            let vm = nlp.values(xm.as_slice(), theta).unwrap();
            close(der.objective_gradient[j], (vp.objective - vm.objective) / (2.0 * h), "grad f");
            for i in 0..d.n_in {
                let fd = (vp.inequalities[i] - vm.inequalities[i]) / (2.0 * h);
                close(der.inequality_jacobian[(i, j)], fd, "jac g");
            }
            for i in 0..d.n_eq {
                let fd = (vp.equalities[i] - vm.equalities[i]) / (2.0 * h);
                close(der.equality_jacobian[(i, j)], fd, "jac h");
            }
            hess.set_column(j, &((grad_l(&xp, theta) - grad_l(&xm, theta)) / (2.0 * h)));
        }
        for (a, b) in der.lagrangian_hessian.iter().zip(hess.iter()) {
            close(*a, *b, "hessian");
        }
        for k in 0..d.n_theta {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[k] += h;
            tm[k] -= h;
            let vp = nlp.values(x.as_slice(), &tp).unwrap();
            let vm = nlp.values(x.as_slice(), &tm).unwrap();
            for i in 0..d.n_in {
                let fd = (vp.inequalities[i] - vm.inequalities[i]) / (2.0 * h);
                close(der.inequality_theta_jacobian[(i, k)], fd, "theta jac g");
            }
            for i in 0..d.n_eq {
                let fd = (vp.equalities[i] - vm.equalities[i]) / (2.0 * h);
                close(der.equality_theta_jacobian[(i, k)], fd, "theta jac h");
            }
            let cross = (grad_l(x, &tp) - grad_l(x, &tm)) / (2.0 * h);
            for i in 0..d.n_x {
                close(der.lagrangian_theta_cross[(i, k)], cross[i], "theta cross");
            }
        }
    }

    #[test]
    fn qp_builder_values() {
        let nlp = build_qp_example(1.0).unwrap();
        let d = nlp.dims();
        assert_eq!((d.n_x, d.n_in, d.n_eq, d.n_theta), (3, 0, 1, 1));
        let v = nlp.values(&[1.0, -0.5, -0.5], &[1.0]).unwrap();
        assert_eq!(v.objective, -0.5);
        let pt = PrimalDualPoint::new(
            &nlp,
            DVector::from_vec(vec![2.0]),
            DVector::from_vec(vec![0.5, -0.25, -0.25]),
            DVector::zeros(0),
            DVector::from_vec(vec![-1.0]),
        )
        .unwrap();
        assert_eq!(pt.kkt_residual_inf(), 0.0);
        // Off-solution stationarity (αx₁ + ν, 1 + ν, 1 + ν).
        let off = PrimalDualPoint::new(
            &nlp,
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![2.0, -1.0, -1.0]),
            DVector::zeros(0),
            DVector::from_vec(vec![-1.0]),
        )
        .unwrap();
        let k = evaluate_kkt(&nlp, &off).unwrap();
        assert_eq!(k.residuals.stationarity.as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(build_qp_example(0.0).unwrap_err(), Error::NonPositiveAlpha(0.0));
        assert_eq!(build_qp_example(-1.0).unwrap_err(), Error::NonPositiveAlpha(-1.0));
    }

    #[test]
    fn grid_endpoints_and_count() {
        let g = log_grid(1e-9, 1e-5, 51);
        assert_eq!(g.len(), 51);
        assert_eq!(g[0], 1e-9);
        assert_eq!(g[50], 1e-5);
        assert!((g[25] - 1e-7).abs() < 1e-20);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn qp_sweep_error_is_linear_in_rho() {
        let nlp = build_qp_example(1.0).unwrap();
        let pt = PrimalDualPoint::new(
            &nlp,
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![1.0, -0.5, -0.5]),
            DVector::zeros(0),
            DVector::from_vec(vec![-1.0]),
        )
        .unwrap();
        let grid = [0.0, 1e-6, 1e-4, 1e-2];
        let r = rho_grid_search(&nlp, &pt, &grid, &FdOptions::with_step(1e-6), &SolverOptions::default(), 1e-6)
            .unwrap();
        assert_eq!(r.rows.len(), 4);
        // Least squares reproduces the warm-started branch.
        assert!(r.rows[0].relative_error_inf < 1e-6);
        let s = (r.rows[3].relative_error_inf / r.rows[2].relative_error_inf).log10() / 2.0;
        assert!((s - 1.0).abs() < 0.05, "{s}");
        assert!(rho_grid_search(&nlp, &pt, &[], &FdOptions::default(), &SolverOptions::default(), 1e-6).is_err());
    }
}
