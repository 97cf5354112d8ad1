//! Parametric nonlinear programs
//!
//! ```text
//! minimize_x  f(x; θ)   subject to  g(x; θ) ≤ 0,  h(x; θ) = 0
//! ```
//!
//! and the first- and second-order quantities every downstream module needs.
//! Problems either implement [`NlpEvaluator`] directly (hand-assembled
//! derivatives, used for the structured trajectory problems) or implement
//! [`SmoothNlp`] generically over [`Scalar`] and get exact derivatives from
//! [`AutoDiff`].

pub mod autodiff;
mod kkt;
mod smooth;

pub use autodiff::{Jet, Scalar};
pub use kkt::{
    check_regularity, detect_active_set, evaluate_kkt, kkt_residual_norms, ActiveSetPartition,
    KktEvaluation, KktResidualNorms, PrimalDualPoint, RegularityReport, DEFAULT_ACTIVITY_TOLERANCE,
};
pub use smooth::{AutoDiff, SmoothNlp};

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct Dims {
    pub n_x: usize,
    pub n_in: usize,
    pub n_eq: usize,
    pub n_theta: usize,
}

/// Function values at a point.
#[derive(Clone, Debug)]
pub struct Values {
    pub objective: f64,
    pub inequalities: DVector<f64>,
    pub equalities: DVector<f64>,
}

/// Everything needed for KKT residuals, SQP steps and sensitivity systems,
/// evaluated at `(x, θ)` with multipliers `(λ, ν)`.
#[derive(Clone, Debug)]
pub struct Derivatives {
    pub values: Values,
    /// ∇ₓf (n_x).
    pub objective_gradient: DVector<f64>,
    /// ∇ₓg (n_in × n_x).
    pub inequality_jacobian: DMatrix<f64>,
    /// ∇ₓh (n_eq × n_x).
    pub equality_jacobian: DMatrix<f64>,
    /// ∇²ₓₓ of the Lagrangian f + λᵀg + νᵀh.
    pub lagrangian_hessian: DMatrix<f64>,
    /// ∇²_θx of the Lagrangian (n_x × n_θ).
    pub lagrangian_theta_cross: DMatrix<f64>,
    /// ∇_θg (n_in × n_θ).
    pub inequality_theta_jacobian: DMatrix<f64>,
    /// ∇_θh (n_eq × n_θ).
    pub equality_theta_jacobian: DMatrix<f64>,
}

/// Object-safe evaluator interface. Implement this directly to supply
/// hand-coded derivatives.
pub trait NlpEvaluator: Send + Sync {
    fn dims(&self) -> Dims;

    fn values(&self, x: &[f64], theta: &[f64]) -> Values;

    fn derivatives(&self, x: &[f64], theta: &[f64], lambda: &[f64], nu: &[f64]) -> Derivatives;

    /// Problem-specific primal initializer used for cold starts.
    fn initial_primal(&self, _theta: &[f64]) -> Option<DVector<f64>> {
        None
    }
}

/// Immutable description of a parametric NLP.
#[derive(Clone)]
pub struct ParametricNlp {
    name: String,
    dims: Dims,
    evaluator: Arc<dyn NlpEvaluator>,
}

impl fmt::Debug for ParametricNlp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParametricNlp")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .finish()
    }
}

const SYMMETRY_TOL: f64 = 1e-10;

impl ParametricNlp {
    /// Wraps an evaluator after probing it at `probe_theta` for dimensional
    /// consistency, finiteness and Hessian symmetry.
    pub fn new(
        name: impl Into<String>,
        evaluator: impl NlpEvaluator + 'static,
        probe_theta: &[f64],
    ) -> Result<Self> {
        let nlp = ParametricNlp {
            name: name.into(),
            dims: evaluator.dims(),
            evaluator: Arc::new(evaluator),
        };
        nlp.probe(probe_theta)?;
        Ok(nlp)
    }

    fn probe(&self, theta: &[f64]) -> Result<()> {
        let d = self.dims;
        if theta.len() != d.n_theta {
            return Err(Error::DimensionMismatch {
                context: "probe parameter",
                expected: d.n_theta,
                actual: theta.len(),
            });
        }
        let x = self.initial_primal(theta);
        let lambda = vec![1.0; d.n_in];
        let nu = vec![1.0; d.n_eq];
        let der = self.derivatives(x.as_slice(), theta, &lambda, &nu)?;
        let h = &der.lagrangian_hessian;
        let scale = h.amax().max(1.0);
        let asym = crate::linalg::asymmetry(h);
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::InvalidProblem(format!(
                "{}: Lagrangian Hessian asymmetric by {asym:.3e}",
                self.name
            )));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn initial_primal(&self, theta: &[f64]) -> DVector<f64> {
        self.evaluator
            .initial_primal(theta)
            .filter(|x| x.len() == self.dims.n_x)
            .unwrap_or_else(|| DVector::zeros(self.dims.n_x))
    }

    fn check_point(&self, x: &[f64], theta: &[f64]) -> Result<()> {
        check_len("primal vector", self.dims.n_x, x.len())?;
        check_len("parameter vector", self.dims.n_theta, theta.len())
    }

    pub fn values(&self, x: &[f64], theta: &[f64]) -> Result<Values> {
        self.check_point(x, theta)?;
        let v = self.evaluator.values(x, theta);
        check_len("inequality values", self.dims.n_in, v.inequalities.len())?;
        check_len("equality values", self.dims.n_eq, v.equalities.len())?;
        if !v.objective.is_finite() {
            return Err(Error::EvaluatorFailure("objective".into()));
        }
        finite("inequalities", v.inequalities.as_slice())?;
        finite("equalities", v.equalities.as_slice())?;
        Ok(v)
    }

    pub fn derivatives(
        &self,
        x: &[f64],
        theta: &[f64],
        lambda: &[f64],
        nu: &[f64],
    ) -> Result<Derivatives> {
        self.check_point(x, theta)?;
        let d = self.dims;
        check_len("inequality multipliers", d.n_in, lambda.len())?;
        check_len("equality multipliers", d.n_eq, nu.len())?;
        let der = self.evaluator.derivatives(x, theta, lambda, nu);
        let shapes: [(&'static str, (usize, usize), (usize, usize)); 6] = [
            ("inequality Jacobian", der.inequality_jacobian.shape(), (d.n_in, d.n_x)),
            ("equality Jacobian", der.equality_jacobian.shape(), (d.n_eq, d.n_x)),
            ("Lagrangian Hessian", der.lagrangian_hessian.shape(), (d.n_x, d.n_x)),
            ("Lagrangian θx cross term", der.lagrangian_theta_cross.shape(), (d.n_x, d.n_theta)),
            ("inequality θ-Jacobian", der.inequality_theta_jacobian.shape(), (d.n_in, d.n_theta)),
            ("equality θ-Jacobian", der.equality_theta_jacobian.shape(), (d.n_eq, d.n_theta)),
        ];
        for (context, got, want) in shapes {
            if got != want {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: want.0 * want.1,
                    actual: got.0 * got.1,
                });
            }
        }
        check_len("objective gradient", d.n_x, der.objective_gradient.len())?;
        check_len("inequality values", d.n_in, der.values.inequalities.len())?;
        check_len("equality values", d.n_eq, der.values.equalities.len())?;
        if !der.values.objective.is_finite() {
            return Err(Error::EvaluatorFailure("objective".into()));
        }
        finite("objective gradient", der.objective_gradient.as_slice())?;
        finite("inequalities", der.values.inequalities.as_slice())?;
        finite("equalities", der.values.equalities.as_slice())?;
        finite("inequality Jacobian", der.inequality_jacobian.as_slice())?;
        finite("equality Jacobian", der.equality_jacobian.as_slice())?;
        finite("Lagrangian Hessian", der.lagrangian_hessian.as_slice())?;
        finite("Lagrangian θx cross term", der.lagrangian_theta_cross.as_slice())?;
        finite("inequality θ-Jacobian", der.inequality_theta_jacobian.as_slice())?;
        finite("equality θ-Jacobian", der.equality_theta_jacobian.as_slice())?;
        Ok(der)
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}

fn finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::EvaluatorFailure(what.to_string()))
    }
}

/// KKT residual ∞-norm from already evaluated derivatives.
pub(crate) fn kkt_norms_from(der: &Derivatives, lambda: &DVector<f64>, nu: &DVector<f64>) -> f64 {
    kkt::norms_of(&kkt::residuals_from(der, lambda, nu)).max()
}
