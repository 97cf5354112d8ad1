//! Dense SQP solver with an ℓ1 merit line search.
//!
//! Each iteration linearizes the constraints, convexifies the Lagrangian
//! Hessian on the equality null space by inertia correction, and solves the
//! QP subproblem with the dual active-set method in [`qp`]. A second-order
//! correction is tried when the full step is rejected by the merit test.
//! Warm starts seed both the primal-dual point and the QP working set, which
//! keeps re-solves after small parameter changes on the same branch.

mod qp;

use nalgebra::DVector;
#[cfg(test)]
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{check_len, Derivatives, ParametricNlp, PrimalDualPoint};
use qp::{EqualityKkt, QpData};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LineSearchOptions {
    /// Initial ℓ1 penalty weight; raised as multipliers grow.
    pub penalty_weight: f64,
    pub backtracking_factor: f64,
    pub min_step: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for LineSearchOptions {
    fn default() -> Self {
        LineSearchOptions {
            penalty_weight: 1.0,
            backtracking_factor: 0.5,
            min_step: 1e-10,
            armijo: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    /// First shift tried when the reduced Hessian is not positive definite.
    pub hessian_regularization: f64,
    /// Initial proximal term added to the QP Hessian. It shrinks tenfold
    /// after every full step and is re-armed after backtracking; it never
    /// moves the converged point.
    pub proximal_damping: f64,
    pub line_search: LineSearchOptions,
    pub qp_max_pivots: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 200,
            kkt_tolerance: 1e-10,
            hessian_regularization: 1e-8,
            proximal_damping: 0.0,
            line_search: LineSearchOptions::default(),
            qp_max_pivots: 20_000,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ls = &self.line_search;
        let ok = self.kkt_tolerance > 0.0
            && self.max_iterations >= 1
            && self.qp_max_pivots >= 1
            && self.hessian_regularization > 0.0
            && self.proximal_damping >= 0.0
            && self.proximal_damping.is_finite()
            && ls.penalty_weight > 0.0
            && ls.backtracking_factor > 0.0
            && ls.backtracking_factor < 1.0
            && ls.min_step > 0.0
            && ls.armijo > 0.0
            && ls.armijo < 0.5;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid solver options: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    QpFailure,
    LineSearchFailure,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveTrace {
    pub iterations: usize,
    pub final_kkt_residual: f64,
    pub status: SolveStatus,
    /// KKT residual ∞-norm at the start of every iteration and at exit.
    pub residual_log: Vec<f64>,
}

impl SolveTrace {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Converts a soft failure into [`Error::SolverFailure`].
    pub fn require_converged(&self, step: Option<usize>) -> Result<()> {
        if self.converged() {
            Ok(())
        } else {
            Err(Error::SolverFailure {
                status: format!(
                    "{:?} after {} iterations (KKT residual {:.3e})",
                    self.status, self.iterations, self.final_kkt_residual
                ),
                step,
            })
        }
    }
}

/// Largest inertia-correction shift before giving up on the QP.
const MAX_SHIFT: f64 = 1e12;
/// Dual regularization used when the equality Jacobian is rank deficient.
const DUAL_REGULARIZATION: f64 = 1e-10;
const MAX_DUAL_REGULARIZATION: f64 = 1e-6;
const PENALTY_MARGIN: f64 = 0.1;
const MIN_REARMED_DAMPING: f64 = 1e-4;
const MIN_ELASTIC_REGULARIZATION: f64 = 1e-6;
const MAX_ELASTIC_REGULARIZATION: f64 = 1.0;
const MAX_DAMPING: f64 = 1e8;
/// Constraints this close to active seed the initial working set.
const WARM_ACTIVITY: f64 = 1e-8;

fn violation(der: &Derivatives) -> f64 {
    der.values.equalities.iter().map(|v| v.abs()).sum::<f64>()
        + der.values.inequalities.iter().map(|v| v.max(0.0)).sum::<f64>()
}

/// ℓ1 violation of the constraints linearized along `p`.
fn linearized_violation(der: &Derivatives, p: &DVector<f64>) -> f64 {
    let h = &der.values.equalities + &der.equality_jacobian * p;
    let g = &der.values.inequalities + &der.inequality_jacobian * p;
    h.iter().map(|v| v.abs()).sum::<f64>() + g.iter().map(|v| v.max(0.0)).sum::<f64>()
}

fn merit_at(nlp: &ParametricNlp, x: &DVector<f64>, theta: &[f64], penalty: f64) -> Result<f64> {
    let v = nlp.values(x.as_slice(), theta)?;
    let viol = v.equalities.iter().map(|e| e.abs()).sum::<f64>()
        + v.inequalities.iter().map(|g| g.max(0.0)).sum::<f64>();
    Ok(v.objective + penalty * viol)
}

/// Solves the NLP at `theta`, warm-started from `init` when given.
///
/// Non-convergence is reported through [`SolveTrace::status`]; the returned
/// point is then the last iterate. Only malformed inputs are hard errors.
pub fn solve(
    nlp: &ParametricNlp,
    theta: &DVector<f64>,
    init: Option<&PrimalDualPoint>,
    options: &SolverOptions,
) -> Result<(PrimalDualPoint, SolveTrace)> {
    options.validate()?;
    let d = nlp.dims();
    check_len("parameter vector", d.n_theta, theta.len())?;
    let th = theta.as_slice();

    let (mut x, mut lambda, mut nu) = match init {
        Some(pt) => {
            check_len("primal vector", d.n_x, pt.x().len())?;
            check_len("inequality multipliers", d.n_in, pt.lambda().len())?;
            check_len("equality multipliers", d.n_eq, pt.nu().len())?;
            (
                pt.x().clone(),
                pt.lambda().map(|v| v.max(0.0)),
                pt.nu().clone(),
            )
        }
        None => (
            nlp.initial_primal(th),
            DVector::zeros(d.n_in),
            DVector::zeros(d.n_eq),
        ),
    };

    let mut working: Vec<usize> = {
        let v = nlp.values(x.as_slice(), th)?;
        (0..d.n_in)
            .filter(|&i| lambda[i] > 0.0 || v.inequalities[i] >= -WARM_ACTIVITY)
            .collect()
    };

    let ls = options.line_search;
    let mut penalty = ls.penalty_weight;
    let mut last_shift = 0.0_f64;
    let mut damping = options.proximal_damping;
    let mut log = Vec::new();
    let mut iterations = 0;

    let status = loop {
        let der = nlp.derivatives(x.as_slice(), th, lambda.as_slice(), nu.as_slice())?;
        let res = crate::model::kkt_norms_from(&der, &lambda, &nu);
        log.push(res);
        if res <= options.kkt_tolerance {
            break SolveStatus::Converged;
        }
        if iterations == options.max_iterations {
            break SolveStatus::MaxIterations;
        }
        iterations += 1;

        // Inertia-corrected factorization of the equality KKT matrix. The
        // dual block carries -dual_reg·I, escalated for rank-deficient
        // equality Jacobians and, when the QP is infeasible, to relax the
        // linearized equalities around the current ν.
        let mut elastic = 0.0;
        let mut escalated = false;
        let attempt = loop {
            let mut shift = 0.0;
            let mut dual_reg = elastic;
            let kkt = loop {
                let mut w = der.lagrangian_hessian.clone();
                for i in 0..d.n_x {
                    w[(i, i)] += shift + damping;
                }
                let (kkt, inertia) = EqualityKkt::factor(&w, &der.equality_jacobian, dual_reg);
                if kkt.has_correct_inertia(inertia) {
                    break Some(kkt);
                }
                if inertia.negative < d.n_eq && dual_reg < MAX_DUAL_REGULARIZATION.max(elastic) {
                    dual_reg = if dual_reg < DUAL_REGULARIZATION {
                        DUAL_REGULARIZATION
                    } else {
                        dual_reg * 100.0
                    };
                    escalated = true;
                    continue;
                }
                shift = if shift == 0.0 {
                    if last_shift == 0.0 {
                        options.hessian_regularization
                    } else {
                        (last_shift / 3.0).max(options.hessian_regularization)
                    }
                } else {
                    shift * 10.0
                };
                if shift > MAX_SHIFT {
                    break None;
                }
            };
            let Some(kkt) = kkt else {
                break None;
            };
            let r_eq = -&der.values.equalities - dual_reg * &nu;
            let r_in = -&der.values.inequalities;
            let solved = qp::solve_qp(
                &kkt,
                &QpData {
                    g: &der.objective_gradient,
                    r_eq: &r_eq,
                    a_in: &der.inequality_jacobian,
                    r_in: &r_in,
                },
                &working,
                options.qp_max_pivots,
            );
            match solved {
                Ok(sol) => break Some((kkt, sol, shift)),
                Err(_) if d.n_eq > 0 && elastic < MAX_ELASTIC_REGULARIZATION => {
                    elastic = if elastic == 0.0 { MIN_ELASTIC_REGULARIZATION } else { elastic * 100.0 };
                    escalated = true;
                }
                Err(_) => break None,
            }
        };
        let Some((kkt, sol, shift)) = attempt else {
            break SolveStatus::QpFailure;
        };
        last_shift = shift;
        working = sol.working_set.clone();

        // The ℓ1 merit is exact once the penalty dominates the multipliers;
        // it must also make p a descent direction with margin PENALTY_MARGIN.
        let dual_max = sol.y.amax().max(sol.lambda.amax());
        if !escalated && penalty < dual_max {
            penalty = dual_max * (1.0 + PENALTY_MARGIN);
        }
        let viol0 = violation(&der);
        let viol_lin = linearized_violation(&der, &sol.p);
        let gp = der.objective_gradient.dot(&sol.p);
        let reduction = viol0 - viol_lin;
        if reduction > 0.0 {
            let curvature = sol.p.dot(&(&der.lagrangian_hessian * &sol.p)).max(0.0);
            let needed = (gp + 0.5 * curvature) / ((1.0 - PENALTY_MARGIN) * reduction);
            if penalty < needed {
                penalty = needed * 1.1;
            }
        }
        let merit0 = der.values.objective + penalty * viol0;
        let slope = gp - penalty * reduction;
        let x_scale = 1.0 + x.amax();
        let tiny_step = sol.p.amax() <= 1e-14 * x_scale;

        let mut alpha = 1.0;
        let mut accepted: Option<DVector<f64>> = None;
        loop {
            let trial = &x + alpha * &sol.p;
            let m = merit_at(nlp, &trial, th, penalty)?;
            if tiny_step || m <= merit0 + ls.armijo * alpha * slope.min(0.0) {
                accepted = Some(trial);
                break;
            }
            if alpha == 1.0 {
                if let Some(x_soc) =
                    second_order_correction(nlp, th, &x, &trial, &der, &kkt, &sol.p, &working, options)?
                {
                    let m_soc = merit_at(nlp, &x_soc, th, penalty)?;
                    if m_soc <= merit0 + ls.armijo * slope.min(0.0) {
                        accepted = Some(x_soc);
                        break;
                    }
                }
            }
            alpha *= ls.backtracking_factor;
            if alpha < ls.min_step {
                break;
            }
        }
        let Some(x_new) = accepted else {
            break SolveStatus::LineSearchFailure;
        };
        damping = if alpha == 1.0 {
            if damping < 1e-12 {
                0.0
            } else {
                damping * 0.1
            }
        } else {
            (damping.max(MIN_REARMED_DAMPING) * 10.0).min(MAX_DAMPING)
        };
        x = x_new;
        lambda += alpha * (&sol.lambda - &lambda);
        lambda.apply(|v| *v = v.max(0.0));
        nu += alpha * (&sol.y - &nu);
        if escalated && d.n_eq > 0 {
            // Multipliers of an inconsistent linearization scale like
            // 1/dual_reg; replace them by least-squares estimates.
            nu = least_squares_equality_multipliers(nlp, th, &x, &lambda, &nu)?;
        }
    };

    let pt = PrimalDualPoint::new(nlp, theta.clone(), x, lambda, nu)?;
    let trace = SolveTrace {
        iterations,
        final_kkt_residual: pt.kkt_residual_inf(),
        status,
        residual_log: log,
    };
    Ok((pt, trace))
}

/// `argmin_ν ‖∇f + ∇gᵀλ + ∇hᵀν‖` at `x`.
fn least_squares_equality_multipliers(
    nlp: &ParametricNlp,
    theta: &[f64],
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> Result<DVector<f64>> {
    let der = nlp.derivatives(x.as_slice(), theta, lambda.as_slice(), nu.as_slice())?;
    let rhs = -(&der.objective_gradient + der.inequality_jacobian.transpose() * lambda);
    let jt = der.equality_jacobian.transpose();
    let tol = 1e-10 * linalg::inf_norm(&jt).max(1.0);
    Ok(linalg::min_norm_lstsq_vec(&jt, &rhs, tol).0)
}

/// Re-solves the QP with constraints re-linearized at the trial point to
/// counter the Maratos effect. Returns `None` when the correction QP fails.
#[allow(clippy::too_many_arguments)]
fn second_order_correction(
    nlp: &ParametricNlp,
    theta: &[f64],
    x: &DVector<f64>,
    trial: &DVector<f64>,
    der: &Derivatives,
    kkt: &EqualityKkt,
    p: &DVector<f64>,
    working: &[usize],
    options: &SolverOptions,
) -> Result<Option<DVector<f64>>> {
    let v = nlp.values(trial.as_slice(), theta)?;
    let r_eq: DVector<f64> = &der.equality_jacobian * p - &v.equalities;
    let r_in: DVector<f64> = &der.inequality_jacobian * p - &v.inequalities;
    let soc = qp::solve_qp(
        kkt,
        &QpData {
            g: &der.objective_gradient,
            r_eq: &r_eq,
            a_in: &der.inequality_jacobian,
            r_in: &r_in,
        },
        working,
        options.qp_max_pivots,
    );
    Ok(soc.ok().map(|s| x + s.p))
}

/// Solves at `theta_new` warm-started from a converged `base`.
pub fn resolve_perturbed(
    nlp: &ParametricNlp,
    base: &PrimalDualPoint,
    theta_new: &DVector<f64>,
    options: &SolverOptions,
) -> Result<(PrimalDualPoint, SolveTrace)> {
    solve(nlp, theta_new, Some(base), options)
}

/// Dense KKT matrix `[[H, Jᵀ], [J, 0]]` for an equality-constrained QP,
/// exposed for tests that compare against a direct solve.
#[cfg(test)]
fn dense_kkt(h: &DMatrix<f64>, j: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (h.nrows(), j.nrows());
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    k.view_mut((n, 0), (m, n)).copy_from(j);
    k.view_mut((0, n), (n, m)).copy_from(&j.transpose());
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AutoDiff, Dims, Scalar, SmoothNlp};

    struct ExampleQp;
    impl SmoothNlp for ExampleQp {
        fn dims(&self) -> Dims {
            Dims { n_x: 3, n_in: 0, n_eq: 1, n_theta: 1 }
        }
        fn objective<S: Scalar>(&self, x: &[S], t: &[S]) -> S {
            t[0] * x[0] * x[0] * 0.5 + x[1] + x[2]
        }
        fn inequalities<S: Scalar>(&self, _: &[S], _: &[S]) -> Vec<S> {
            vec![]
        }
        fn equalities<S: Scalar>(&self, x: &[S], _: &[S]) -> Vec<S> {
            vec![x[0] + x[1] + x[2]]
        }
    }

    struct Projection;
    impl SmoothNlp for Projection {
        fn dims(&self) -> Dims {
            Dims { n_x: 2, n_in: 0, n_eq: 0, n_theta: 2 }
        }
        fn objective<S: Scalar>(&self, x: &[S], t: &[S]) -> S {
            ((x[0] - t[0]).square() + (x[1] - t[1]).square()) * 0.5
        }
        fn inequalities<S: Scalar>(&self, _: &[S], _: &[S]) -> Vec<S> {
            vec![]
        }
        fn equalities<S: Scalar>(&self, _: &[S], _: &[S]) -> Vec<S> {
            vec![]
        }
    }

    /// Rosenbrock-like objective on a disk with a nonlinear equality.
    struct Nonconvex;
    impl SmoothNlp for Nonconvex {
        fn dims(&self) -> Dims {
            Dims { n_x: 3, n_in: 2, n_eq: 1, n_theta: 1 }
        }
        fn objective<S: Scalar>(&self, x: &[S], t: &[S]) -> S {
            (x[1] - x[0] * x[0]).square() * 10.0 + (-x[0] + 1.0).square() - t[0] * x[2]
        }
        fn inequalities<S: Scalar>(&self, x: &[S], _: &[S]) -> Vec<S> {
            vec![x[0] * x[0] + x[1] * x[1] - 1.5, x[2] - 0.5]
        }
        fn equalities<S: Scalar>(&self, x: &[S], _: &[S]) -> Vec<S> {
            vec![x[2] - x[0] * x[1] * 0.5 - x[2].sin() * 0.1]
        }
        fn initial_primal(&self, _: &[f64]) -> Option<DVector<f64>> {
            Some(DVector::from_vec(vec![-0.5, 0.8, 0.0]))
        }
    }

    fn qp(alpha: f64) -> ParametricNlp {
        ParametricNlp::new("qp", AutoDiff::<_, 4>::new(ExampleQp), &[alpha]).unwrap()
    }

    #[test]
    fn degenerate_qp_cold_start() {
        let nlp = qp(1.0);
        let (pt, trace) = solve(&nlp, &DVector::from_vec(vec![1.0]), None, &SolverOptions::default()).unwrap();
        assert!(trace.converged(), "{trace:?}");
        assert!((pt.x()[0] - 1.0).abs() < 1e-10);
        assert!((pt.x()[1] + pt.x()[2] + 1.0).abs() < 1e-10);
        assert!((pt.nu()[0] + 1.0).abs() < 1e-10);
        assert!(pt.kkt_residual_inf() <= 1e-10);
    }

    #[test]
    fn unconstrained_projection() {
        let nlp = ParametricNlp::new("proj", AutoDiff::<_, 4>::new(Projection), &[0.0, 0.0]).unwrap();
        let theta = DVector::from_vec(vec![2.0, 3.0]);
        let (pt, trace) = solve(&nlp, &theta, None, &SolverOptions::default()).unwrap();
        assert!(trace.converged());
        assert!((pt.x() - &theta).amax() < 1e-12);
    }

    #[test]
    fn resolve_with_same_theta_is_identity() {
        let nlp = qp(1.0);
        let theta = DVector::from_vec(vec![1.0]);
        let opts = SolverOptions::default();
        let (base, _) = solve(&nlp, &theta, None, &opts).unwrap();
        let (again, trace) = resolve_perturbed(&nlp, &base, &theta, &opts).unwrap();
        assert_eq!(trace.iterations, 0);
        assert_eq!(again, base);
    }

    #[test]
    fn qp_perturbation_keeps_even_split() {
        let nlp = qp(1.0);
        let opts = SolverOptions::default();
        let (base, _) = solve(&nlp, &DVector::from_vec(vec![1.0]), None, &opts).unwrap();
        let (pt, trace) = resolve_perturbed(&nlp, &base, &DVector::from_vec(vec![2.0]), &opts).unwrap();
        assert!(trace.converged());
        assert!((pt.x()[0] - 0.5).abs() < 1e-10);
        // The degenerate direction x₂ − x₃ is preserved from the base.
        assert!(((pt.x()[1] - pt.x()[2]) - (base.x()[1] - base.x()[2])).abs() < 1e-8);
        assert!((pt.x()[1] + pt.x()[2] + 0.5).abs() < 1e-10);
    }

    #[test]
    fn nonconvex_problem_converges_deterministically() {
        let nlp = ParametricNlp::new("nc", AutoDiff::<_, 4>::new(Nonconvex), &[1.0]).unwrap();
        let theta = DVector::from_vec(vec![1.0]);
        let opts = SolverOptions::default();
        let (a, ta) = solve(&nlp, &theta, None, &opts).unwrap();
        let (b, tb) = solve(&nlp, &theta, None, &opts).unwrap();
        assert!(ta.converged(), "{ta:?}");
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(a.lambda().iter().all(|&l| l >= 0.0));
        let v = nlp.values(a.x().as_slice(), theta.as_slice()).unwrap();
        assert!(v.inequalities.iter().all(|&g| g <= 1e-10));
        assert!(v.equalities[0].abs() <= 1e-10);
    }

    #[test]
    fn convex_qp_matches_dense_kkt_solve() {
        // min ½xᵀHx + cᵀx s.t. Jx = b; the inequality x₀ ≤ 10 stays inactive.
        struct Cvx;
        impl SmoothNlp for Cvx {
            fn dims(&self) -> Dims {
                Dims { n_x: 3, n_in: 1, n_eq: 2, n_theta: 1 }
            }
            fn objective<S: Scalar>(&self, x: &[S], t: &[S]) -> S {
                x[0] * x[0] * 2.0 + x[1] * x[1] + x[2] * x[2] * 1.5 + x[0] * x[1] * 0.5
                    - x[0] * t[0]
                    + x[2]
            }
            fn inequalities<S: Scalar>(&self, x: &[S], _: &[S]) -> Vec<S> {
                vec![x[0] - 10.0]
            }
            fn equalities<S: Scalar>(&self, x: &[S], t: &[S]) -> Vec<S> {
                vec![x[0] + x[1] - t[0], x[1] - x[2] * 2.0]
            }
        }
        let nlp = ParametricNlp::new("cvx", AutoDiff::<_, 4>::new(Cvx), &[1.0]).unwrap();
        let theta = DVector::from_vec(vec![0.7]);
        let (pt, trace) = solve(&nlp, &theta, None, &SolverOptions::default()).unwrap();
        assert!(trace.converged());
        let h = DMatrix::from_row_slice(3, 3, &[4.0, 0.5, 0.0, 0.5, 2.0, 0.0, 0.0, 0.0, 3.0]);
        let j = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 1.0, -2.0]);
        let k = dense_kkt(&h, &j);
        let rhs = DVector::from_vec(vec![0.7, 0.0, -1.0, 0.7, 0.0]);
        let z = k.lu().solve(&rhs).unwrap();
        for i in 0..3 {
            assert!((pt.x()[i] - z[i]).abs() < 1e-8);
        }
        for i in 0..2 {
            assert!((pt.nu()[i] - z[3 + i]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_options_and_sizes() {
        let nlp = qp(1.0);
        let opts = SolverOptions { kkt_tolerance: 0.0, ..Default::default() };
        assert!(matches!(
            solve(&nlp, &DVector::from_vec(vec![1.0]), None, &opts),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            solve(&nlp, &DVector::from_vec(vec![1.0, 2.0]), None, &SolverOptions::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
