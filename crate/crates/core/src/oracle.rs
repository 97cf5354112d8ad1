//! Finite-difference reference Jacobians and comparison metrics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ParametricNlp, PrimalDualPoint};
use crate::sensitivity::{Diagnostics, SensitivityMethod, SensitivityResult};
use crate::sqp::{solve, SolverOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FdScheme {
    Central,
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdOptions {
    pub step: f64,
    pub scheme: FdScheme,
    pub warm_start: bool,
    /// A re-solve farther than `factor · step · (1 + ‖x̄‖∞)` from the base
    /// point is treated as a jump to another local minimizer.
    pub trust_radius_factor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            scheme: FdScheme::Central,
            warm_start: true,
            trust_radius_factor: 10.0,
        }
    }
}

impl FdOptions {
    pub fn with_step(step: f64) -> Self {
        FdOptions {
            step,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.step > 0.0 && self.step.is_finite() && self.trust_radius_factor > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid finite-difference options: {self:?}")))
        }
    }
}

/// Differentiates the solution map by re-solving at perturbed parameters.
///
/// Every re-solve must converge; one that lands outside the trust radius
/// yields [`Error::BranchJump`].
pub fn finite_difference_jacobian(
    nlp: &ParametricNlp,
    pt: &PrimalDualPoint,
    options: &FdOptions,
    solver_options: &SolverOptions,
) -> Result<SensitivityResult> {
    options.validate()?;
    let n_theta = pt.theta().len();
    let n_x = pt.x().len();
    let radius = options.trust_radius_factor * options.step * (1.0 + pt.x().amax());

    let resolve = |k: usize, sign: f64| -> Result<_> {
        let mut theta = pt.theta().clone();
        theta[k] += sign * options.step;
        let init = options.warm_start.then_some(pt);
        let (sol, trace) = solve(nlp, &theta, init, solver_options)?;
        trace.require_converged(None)?;
        let distance = (sol.x() - pt.x()).amax();
        if distance > radius {
            return Err(Error::BranchJump {
                coordinate: k,
                distance,
                radius,
            });
        }
        Ok(sol.x().clone())
    };

    let mut jac = DMatrix::zeros(n_x, n_theta);
    for k in 0..n_theta {
        let col = match options.scheme {
            FdScheme::Central => (resolve(k, 1.0)? - resolve(k, -1.0)?) / (2.0 * options.step),
            FdScheme::Forward => (resolve(k, 1.0)? - pt.x()) / options.step,
        };
        jac.set_column(k, &col);
    }
    Ok(SensitivityResult {
        dx_dtheta: jac,
        dual_sensitivities: None,
        method: SensitivityMethod::FiniteDifference { step: options.step },
        diagnostics: Diagnostics {
            condition_estimate: 0.0,
            linear_residual: 0.0,
            ill_conditioned: false,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMetrics {
    /// `‖J₁ − J₂‖∞ / ‖J₂‖∞` with the induced (max row sum) norm.
    pub relative_error_inf: f64,
    /// Cosine of the angle between the flattened Jacobians.
    pub cosine_similarity: f64,
}

/// Compares Jacobians; `reference` supplies the relative-error denominator.
pub fn compare_matrices(candidate: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<ComparisonMetrics> {
    if candidate.shape() != reference.shape() {
        return Err(Error::DimensionMismatch {
            context: "compared Jacobians",
            expected: reference.len(),
            actual: candidate.len(),
        });
    }
    let ref_norm = linalg::inf_norm(reference);
    if ref_norm == 0.0 {
        return Err(Error::ZeroReference);
    }
    let relative_error_inf = linalg::inf_norm(&(candidate - reference)) / ref_norm;
    let denom = candidate.norm() * reference.norm();
    let cosine_similarity = if denom == 0.0 {
        0.0
    } else {
        (candidate.dot(reference) / denom).clamp(-1.0, 1.0)
    };
    Ok(ComparisonMetrics {
        relative_error_inf,
        cosine_similarity,
    })
}

pub fn compare(candidate: &SensitivityResult, reference: &SensitivityResult) -> Result<ComparisonMetrics> {
    compare_matrices(&candidate.dx_dtheta, &reference.dx_dtheta)
}
