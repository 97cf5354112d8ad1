use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use super::{check_len, Derivatives, ParametricNlp};
use crate::error::{Error, Result};
use crate::linalg;

/// Absolute threshold on `|g_i(x)|` for calling a constraint active.
pub const DEFAULT_ACTIVITY_TOLERANCE: f64 = 1e-6;

/// Multipliers below `-MULTIPLIER_TOLERANCE` are rejected.
pub const MULTIPLIER_TOLERANCE: f64 = 1e-8;

/// Primal-dual point `(x, λ, ν)` at parameter `θ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrimalDualPoint {
    theta: DVector<f64>,
    x: DVector<f64>,
    lambda: DVector<f64>,
    nu: DVector<f64>,
    kkt_residual_inf: f64,
}

impl PrimalDualPoint {
    pub fn new(
        nlp: &ParametricNlp,
        theta: DVector<f64>,
        x: DVector<f64>,
        lambda: DVector<f64>,
        nu: DVector<f64>,
    ) -> Result<Self> {
        let d = nlp.dims();
        check_len("parameter vector", d.n_theta, theta.len())?;
        check_len("primal vector", d.n_x, x.len())?;
        check_len("inequality multipliers", d.n_in, lambda.len())?;
        check_len("equality multipliers", d.n_eq, nu.len())?;
        if let Some((i, &v)) = lambda
            .iter()
            .enumerate()
            .find(|(_, v)| **v < -MULTIPLIER_TOLERANCE)
        {
            return Err(Error::InvalidProblem(format!(
                "inequality multiplier {i} is negative ({v:.3e})"
            )));
        }
        let mut pt = PrimalDualPoint {
            theta,
            x,
            lambda,
            nu,
            kkt_residual_inf: f64::NAN,
        };
        pt.kkt_residual_inf = kkt_residual_norms(nlp, &pt)?.max();
        Ok(pt)
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }
    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }
    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }
    pub fn nu(&self) -> &DVector<f64> {
        &self.nu
    }
    pub fn kkt_residual_inf(&self) -> f64 {
        self.kkt_residual_inf
    }

    fn derivatives(&self, nlp: &ParametricNlp) -> Result<Derivatives> {
        nlp.derivatives(
            self.x.as_slice(),
            self.theta.as_slice(),
            self.lambda.as_slice(),
            self.nu.as_slice(),
        )
    }
}

/// Partition of the inequality indices into active and inactive sets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActiveSetPartition {
    pub active: Vec<usize>,
    pub inactive: Vec<usize>,
    pub tolerance: f64,
}

impl ActiveSetPartition {
    /// Active means `|g_i| ≤ tolerance`.
    pub fn from_values(g: &DVector<f64>, tolerance: f64) -> Self {
        let (active, inactive) = (0..g.len()).partition(|&i| g[i].abs() <= tolerance);
        ActiveSetPartition {
            active,
            inactive,
            tolerance,
        }
    }
}

/// Residual blocks of the KKT conditions.
#[derive(Clone, Debug)]
pub struct KktResiduals {
    /// ∇ₓL̄.
    pub stationarity: DVector<f64>,
    /// `(max(g, 0), h)`.
    pub feasibility: DVector<f64>,
    /// Per inequality: `max(|λ_i g_i|, max(-λ_i, 0), max(g_i, 0))`.
    pub complementarity: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KktResidualNorms {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl KktResidualNorms {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

/// All derivative blocks entering the KKT and sensitivity systems.
#[derive(Clone, Debug)]
pub struct KktEvaluation {
    pub lagrangian_hessian: DMatrix<f64>,
    pub grad_g: DMatrix<f64>,
    pub grad_h: DMatrix<f64>,
    pub theta_cross: DMatrix<f64>,
    pub theta_grad_g: DMatrix<f64>,
    pub theta_grad_h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub h: DVector<f64>,
    pub objective_gradient: DVector<f64>,
    pub residuals: KktResiduals,
}

pub(crate) fn residuals_from(
    der: &Derivatives,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> KktResiduals {
    let g = &der.values.inequalities;
    let h = &der.values.equalities;
    let stationarity = &der.objective_gradient
        + der.inequality_jacobian.tr_mul(lambda)
        + der.equality_jacobian.tr_mul(nu);
    let feasibility = DVector::from_iterator(
        g.len() + h.len(),
        g.iter().map(|v| v.max(0.0)).chain(h.iter().copied()),
    );
    let complementarity = DVector::from_fn(g.len(), |i, _| {
        (lambda[i] * g[i])
            .abs()
            .max((-lambda[i]).max(0.0))
            .max(g[i].max(0.0))
    });
    KktResiduals {
        stationarity,
        feasibility,
        complementarity,
    }
}

pub(crate) fn norms_of(r: &KktResiduals) -> KktResidualNorms {
    KktResidualNorms {
        stationarity: r.stationarity.amax(),
        feasibility: r.feasibility.amax(),
        complementarity: r.complementarity.amax(),
    }
}

pub fn evaluate_kkt(nlp: &ParametricNlp, pt: &PrimalDualPoint) -> Result<KktEvaluation> {
    let der = pt.derivatives(nlp)?;
    let residuals = residuals_from(&der, &pt.lambda, &pt.nu);
    Ok(KktEvaluation {
        lagrangian_hessian: der.lagrangian_hessian,
        grad_g: der.inequality_jacobian,
        grad_h: der.equality_jacobian,
        theta_cross: der.lagrangian_theta_cross,
        theta_grad_g: der.inequality_theta_jacobian,
        theta_grad_h: der.equality_theta_jacobian,
        g: der.values.inequalities,
        h: der.values.equalities,
        objective_gradient: der.objective_gradient,
        residuals,
    })
}

pub fn kkt_residual_norms(nlp: &ParametricNlp, pt: &PrimalDualPoint) -> Result<KktResidualNorms> {
    let der = pt.derivatives(nlp)?;
    Ok(norms_of(&residuals_from(&der, &pt.lambda, &pt.nu)))
}

pub fn detect_active_set(
    nlp: &ParametricNlp,
    pt: &PrimalDualPoint,
    tolerance: f64,
) -> Result<ActiveSetPartition> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::Config(format!(
            "activity tolerance must be positive, got {tolerance}"
        )));
    }
    let v = nlp.values(pt.x.as_slice(), pt.theta.as_slice())?;
    Ok(ActiveSetPartition::from_values(&v.inequalities, tolerance))
}

/// Outcome of the LICQ / SCS / SSOSC checks with the underlying margins.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegularityReport {
    pub licq: bool,
    /// Smallest singular value of `col(∇ₓg_ℐ, ∇ₓh)`; `+∞` when it has no rows.
    pub licq_min_singular_value: f64,
    pub scs: bool,
    /// Smallest active multiplier; `+∞` when no inequality is active.
    pub scs_min_active_multiplier: f64,
    pub ssosc: bool,
    /// Smallest eigenvalue of the reduced Hessian; `+∞` for a trivial null space.
    pub ssosc_min_eigenvalue: f64,
    pub active_set: ActiveSetPartition,
}

pub fn check_regularity(
    nlp: &ParametricNlp,
    pt: &PrimalDualPoint,
    tolerance: f64,
) -> Result<RegularityReport> {
    let kkt = evaluate_kkt(nlp, pt)?;
    let active_set = ActiveSetPartition::from_values(&kkt.g, tolerance);
    let n = nlp.dims().n_x;

    let stack = |rows: &[usize]| {
        let m = rows.len() + kkt.grad_h.nrows();
        let mut c = DMatrix::zeros(m, n);
        for (r, &i) in rows.iter().enumerate() {
            c.set_row(r, &kkt.grad_g.row(i));
        }
        c.view_mut((rows.len(), 0), (kkt.grad_h.nrows(), n))
            .copy_from(&kkt.grad_h);
        c
    };

    let licq_matrix = stack(&active_set.active);
    let licq_min_singular_value = if licq_matrix.nrows() == 0 {
        f64::INFINITY
    } else if licq_matrix.nrows() > n {
        0.0
    } else {
        licq_matrix
            .clone()
            .svd(false, false)
            .singular_values
            .min()
    };

    let scs_min_active_multiplier = active_set
        .active
        .iter()
        .map(|&i| pt.lambda[i])
        .fold(f64::INFINITY, f64::min);

    let strongly_active: Vec<usize> = active_set
        .active
        .iter()
        .copied()
        .filter(|&i| pt.lambda[i] > tolerance)
        .collect();
    let c = stack(&strongly_active);
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficientBasis("non-finite constraint Jacobian".into()));
    }
    let (z, _) = linalg::null_space(&c, 1e-10);
    let ssosc_min_eigenvalue = if z.ncols() == 0 {
        f64::INFINITY
    } else {
        let reduced = z.transpose() * &kkt.lagrangian_hessian * &z;
        let sym = 0.5 * (&reduced + reduced.transpose());
        let eig = SymmetricEigen::new(sym).eigenvalues;
        if eig.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankDeficientBasis("reduced Hessian eigenvalues".into()));
        }
        eig.min()
    };

    Ok(RegularityReport {
        licq: licq_min_singular_value > tolerance,
        licq_min_singular_value,
        scs: scs_min_active_multiplier > tolerance,
        scs_min_active_multiplier,
        ssosc: ssosc_min_eigenvalue > tolerance,
        ssosc_min_eigenvalue,
        active_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AutoDiff, Dims, Scalar, SmoothNlp};

    /// (α/2)x₁² + x₂ + x₃ s.t. x₁ + x₂ + x₃ = 0, θ = α.
    struct DegenerateQp;
    impl SmoothNlp for DegenerateQp {
        fn dims(&self) -> Dims {
            Dims { n_x: 3, n_in: 0, n_eq: 1, n_theta: 1 }
        }
        fn objective<S: Scalar>(&self, x: &[S], t: &[S]) -> S {
            t[0] * x[0] * x[0] * 0.5 + x[1] + x[2]
        }
        fn inequalities<S: Scalar>(&self, _x: &[S], _t: &[S]) -> Vec<S> {
            vec![]
        }
        fn equalities<S: Scalar>(&self, x: &[S], _t: &[S]) -> Vec<S> {
            vec![x[0] + x[1] + x[2]]
        }
    }

    /// ½‖x − θ‖² with g(x) = x (componentwise).
    struct Shifted<const K: usize>;
    impl<const K: usize> SmoothNlp for Shifted<K> {
        fn dims(&self) -> Dims {
            Dims { n_x: 2, n_in: K, n_eq: 0, n_theta: 2 }
        }
        fn objective<S: Scalar>(&self, x: &[S], t: &[S]) -> S {
            (x[0] - t[0]).square() * 0.5 + (x[1] - t[1]).square() * 0.5
        }
        fn inequalities<S: Scalar>(&self, x: &[S], _t: &[S]) -> Vec<S> {
            x[..K].to_vec()
        }
        fn equalities<S: Scalar>(&self, _x: &[S], _t: &[S]) -> Vec<S> {
            vec![]
        }
    }

    fn qp() -> ParametricNlp {
        ParametricNlp::new("qp", AutoDiff::<_, 4>::new(DegenerateQp), &[1.0]).unwrap()
    }

    fn point(nlp: &ParametricNlp, theta: &[f64], x: &[f64], lambda: &[f64], nu: &[f64]) -> PrimalDualPoint {
        PrimalDualPoint::new(
            nlp,
            DVector::from_column_slice(theta),
            DVector::from_column_slice(x),
            DVector::from_column_slice(lambda),
            DVector::from_column_slice(nu),
        )
        .unwrap()
    }

    #[test]
    fn qp_solution_has_zero_residual() {
        let nlp = qp();
        let pt = point(&nlp, &[1.0], &[1.0, -0.5, -0.5], &[], &[-1.0]);
        let kkt = evaluate_kkt(&nlp, &pt).unwrap();
        assert_eq!(kkt.residuals.stationarity.amax(), 0.0);
        assert_eq!(
            kkt.lagrangian_hessian,
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 0.0]))
        );
        assert_eq!(pt.kkt_residual_inf(), 0.0);
    }

    #[test]
    fn qp_residuals_off_solution() {
        let nlp = qp();
        let pt = point(&nlp, &[1.0], &[2.0, -1.0, -1.0], &[], &[-1.0]);
        let kkt = evaluate_kkt(&nlp, &pt).unwrap();
        assert_eq!(kkt.residuals.stationarity.as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(kkt.residuals.feasibility.amax(), 0.0);

        let pt = point(&nlp, &[1.0], &[1.0, -0.5, -0.5], &[], &[0.0]);
        let norms = kkt_residual_norms(&nlp, &pt).unwrap();
        assert_eq!(norms.stationarity, 1.0);
    }

    #[test]
    fn unconstrained_identity_case() {
        let nlp = ParametricNlp::new("id", AutoDiff::<_, 4>::new(Shifted::<0>), &[0.0, 0.0]).unwrap();
        let pt = point(&nlp, &[0.0, 0.0], &[0.0, 0.0], &[], &[]);
        let kkt = evaluate_kkt(&nlp, &pt).unwrap();
        assert_eq!(kkt.lagrangian_hessian, DMatrix::identity(2, 2));
        assert_eq!(pt.kkt_residual_inf(), 0.0);
        let reg = check_regularity(&nlp, &pt, 1e-8).unwrap();
        assert!(reg.licq && reg.scs && reg.ssosc);
    }

    #[test]
    fn active_set_threshold_rule() {
        let nlp = ParametricNlp::new("g", AutoDiff::<_, 4>::new(Shifted::<2>), &[0.0, 0.0]).unwrap();
        let pt = point(&nlp, &[0.0, 0.0], &[-0.5, 0.0], &[0.0, 0.0], &[]);
        let p = detect_active_set(&nlp, &pt, 1e-6).unwrap();
        assert_eq!(p.active, vec![1]);
        assert_eq!(p.inactive, vec![0]);

        let pt = point(&nlp, &[0.0, 0.0], &[-1e-9, -0.3], &[0.0, 0.0], &[]);
        assert_eq!(detect_active_set(&nlp, &pt, 1e-6).unwrap().active, vec![0]);

        let pt = point(&nlp, &[0.0, 0.0], &[-0.1, -0.2], &[0.0, 0.0], &[]);
        assert!(detect_active_set(&nlp, &pt, 1e-6).unwrap().active.is_empty());
        assert!(detect_active_set(&nlp, &pt, 0.0).is_err());
    }

    #[test]
    fn degenerate_qp_fails_ssosc_only() {
        let nlp = qp();
        let pt = point(&nlp, &[1.0], &[1.0, -0.5, -0.5], &[], &[-1.0]);
        let reg = check_regularity(&nlp, &pt, 1e-8).unwrap();
        assert!(reg.licq);
        assert!((reg.licq_min_singular_value - 3f64.sqrt()).abs() < 1e-12);
        assert!(reg.scs);
        assert!(!reg.ssosc);
        assert!(reg.ssosc_min_eigenvalue.abs() < 1e-12);
    }

    #[test]
    fn rejects_negative_multipliers_and_bad_sizes() {
        let nlp = ParametricNlp::new("g", AutoDiff::<_, 4>::new(Shifted::<2>), &[0.0, 0.0]).unwrap();
        let bad = PrimalDualPoint::new(
            &nlp,
            DVector::zeros(2),
            DVector::zeros(2),
            DVector::from_vec(vec![-1.0, 0.0]),
            DVector::zeros(0),
        );
        assert!(bad.is_err());
        let bad = PrimalDualPoint::new(
            &nlp,
            DVector::zeros(2),
            DVector::zeros(3),
            DVector::zeros(2),
            DVector::zeros(0),
        );
        assert!(matches!(bad, Err(Error::DimensionMismatch { .. })));
    }
}
