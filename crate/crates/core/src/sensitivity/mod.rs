//! Jacobians of the solution map `θ ↦ x(θ)`.
//!
//! Every direct method solves a linearization of the KKT conditions for the
//! true derivative, i.e. `M·V = −rhs`; the first `n_x` rows of `V` are
//! `∂x/∂θ`. The negated right-hand side is the sign calibration that makes
//! `f = ½x² − θx` give `dx/dθ = +1` for every method, including the
//! finite-difference oracle.
//!
//! * [`classical_jacobian`]: the implicit-function system on the active set.
//!   Requires LICQ, strict complementarity and second-order sufficiency.
//! * [`surrogate_jacobian`]: the proximally regularized system obtained by
//!   lifting inequalities to slacks, well posed for every small `ρ > 0`.
//! * [`least_squares_jacobian`]: the minimum-norm solution of the (possibly
//!   singular) classical system, kept as a baseline.

mod lifted;
mod surrogate;

pub use lifted::{
    kkt_p2_residual, lemma2_constraint_matrix, lift_to_slack, p3_kkt_residual, predict_solution,
    LiftedPoint,
};
pub use surrogate::{
    assemble_surrogate_system, surrogate_jacobian, theorem1_constants, SurrogateSystem,
    TheoremOneConstants,
};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, LdltFactor};
use crate::model::{evaluate_kkt, ActiveSetPartition, KktEvaluation, ParametricNlp, PrimalDualPoint};

/// Default regularization weight.
pub const DEFAULT_RHO: f64 = 1e-5;

/// A classical system whose smallest `D` pivot is below this fraction of the
/// matrix scale is reported as singular.
const SINGULAR_PIVOT_TOL: f64 = 1e-12;

/// Conditioning beyond `1 / (ε · 1e3)` is flagged on surrogate solves.
pub const ILL_CONDITIONED_THRESHOLD: f64 = 1.0 / (f64::EPSILON * 1e3);

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum SensitivityMethod {
    Classical,
    Surrogate { rho: f64 },
    LeastSquares,
    FiniteDifference { step: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    /// ∞-norm condition estimate of the solved matrix (`∞` if singular).
    pub condition_estimate: f64,
    /// `‖M V + rhs‖∞` of the linear solve; zero for finite differences.
    pub linear_residual: f64,
    /// Condition estimate exceeds [`ILL_CONDITIONED_THRESHOLD`].
    pub ill_conditioned: bool,
}

/// Multiplier and slack Jacobians of the lifted problem.
///
/// Rows follow the original constraint order. For the surrogate these are
/// the sensitivities of the lifted variables `(z, μ)`; they are not claimed
/// to be the multiplier sensitivities of the unlifted problem.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualSensitivities {
    pub lambda: DMatrix<f64>,
    pub nu: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityResult {
    pub dx_dtheta: DMatrix<f64>,
    pub dual_sensitivities: Option<DualSensitivities>,
    pub method: SensitivityMethod,
    pub diagnostics: Diagnostics,
}

impl SensitivityResult {
    /// Promotes the ill-conditioning flag to [`Error::IllConditioned`].
    pub fn check_conditioning(&self) -> Result<()> {
        if self.diagnostics.ill_conditioned {
            Err(Error::IllConditioned(self.diagnostics.condition_estimate))
        } else {
            Ok(())
        }
    }
}

/// Classical KKT matrix and right-hand side restricted to the active set:
///
/// ```text
/// A = [[∇²L, ∇g_Aᵀ, ∇hᵀ], [∇g_A, 0, 0], [∇h, 0, 0]],  b = col(∇²_θx L, ∇_θ g_A, ∇_θ h)
/// ```
pub(crate) fn classical_system(
    kkt: &KktEvaluation,
    partition: &ActiveSetPartition,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let nx = kkt.lagrangian_hessian.nrows();
    let nt = kkt.theta_cross.ncols();
    let na = partition.active.len();
    let ne = kkt.grad_h.nrows();
    let n = nx + na + ne;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, nt);
    a.view_mut((0, 0), (nx, nx)).copy_from(&kkt.lagrangian_hessian);
    b.view_mut((0, 0), (nx, nt)).copy_from(&kkt.theta_cross);
    for (r, &i) in partition.active.iter().enumerate() {
        for j in 0..nx {
            a[(nx + r, j)] = kkt.grad_g[(i, j)];
            a[(j, nx + r)] = kkt.grad_g[(i, j)];
        }
        for k in 0..nt {
            b[(nx + r, k)] = kkt.theta_grad_g[(i, k)];
        }
    }
    for r in 0..ne {
        for j in 0..nx {
            a[(nx + na + r, j)] = kkt.grad_h[(r, j)];
            a[(j, nx + na + r)] = kkt.grad_h[(r, j)];
        }
        for k in 0..nt {
            b[(nx + na + r, k)] = kkt.theta_grad_h[(r, k)];
        }
    }
    (a, b)
}

fn residual_inf(m: &DMatrix<f64>, v: &DMatrix<f64>, rhs: &DMatrix<f64>) -> f64 {
    (m * v + rhs).amax()
}

/// Classical implicit-function Jacobian.
///
/// Fails with [`Error::SingularKktMatrix`] when the active-set KKT matrix is
/// singular, which happens exactly when LICQ or second-order sufficiency
/// fails; use [`surrogate_jacobian`] then.
pub fn classical_jacobian(
    nlp: &ParametricNlp,
    pt: &PrimalDualPoint,
    tolerance: f64,
) -> Result<SensitivityResult> {
    let kkt = evaluate_kkt(nlp, pt)?;
    let partition = crate::model::detect_active_set(nlp, pt, tolerance)?;
    let (a, b) = classical_system(&kkt, &partition);
    let factor = LdltFactor::factor(&a);
    if factor.is_singular(SINGULAR_PIVOT_TOL) {
        return Err(Error::SingularKktMatrix {
            min_pivot: factor.min_pivot(),
        });
    }
    let v = -factor.solve_matrix(&b);
    let nx = nlp.dims().n_x;
    let condition = linalg::condition_inf(&a, &factor);
    Ok(SensitivityResult {
        dx_dtheta: v.rows(0, nx).into_owned(),
        dual_sensitivities: None,
        method: SensitivityMethod::Classical,
        diagnostics: Diagnostics {
            condition_estimate: condition,
            linear_residual: residual_inf(&a, &v, &b),
            ill_conditioned: condition > ILL_CONDITIONED_THRESHOLD,
        },
    })
}

/// Minimum-norm least-squares solution of the classical system.
pub fn least_squares_jacobian(
    nlp: &ParametricNlp,
    pt: &PrimalDualPoint,
    tolerance: f64,
) -> Result<SensitivityResult> {
    let kkt = evaluate_kkt(nlp, pt)?;
    let partition = crate::model::detect_active_set(nlp, pt, tolerance)?;
    let (a, b) = classical_system(&kkt, &partition);
    let rank_tol = 1e-10 * linalg::inf_norm(&a);
    let (v, rank) = linalg::min_norm_lstsq(&a, &(-&b), rank_tol);
    let nx = nlp.dims().n_x;
    let condition = if rank < a.nrows() {
        f64::INFINITY
    } else {
        linalg::condition_inf(&a, &LdltFactor::factor(&a))
    };
    Ok(SensitivityResult {
        dx_dtheta: v.rows(0, nx).into_owned(),
        dual_sensitivities: None,
        method: SensitivityMethod::LeastSquares,
        diagnostics: Diagnostics {
            condition_estimate: condition,
            linear_residual: residual_inf(&a, &v, &b),
            ill_conditioned: condition > ILL_CONDITIONED_THRESHOLD,
        },
    })
}
