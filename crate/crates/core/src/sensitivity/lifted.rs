//! The slack-lifted problem
//!
//! ```text
//! minimize f(x)  s.t.  c(x, z) = (g(x) + ½z², h(x)) = 0
//! ```
//!
//! and the proximal problem built around one of its KKT points.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::SensitivityResult;
use crate::error::{Error, Result};
use crate::model::{check_len, ParametricNlp, PrimalDualPoint, DEFAULT_ACTIVITY_TOLERANCE};

/// Primal-dual point of the lifted problem: `(x, z, μ)` with `μ = (λ, ν)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LiftedPoint {
    x: DVector<f64>,
    z: DVector<f64>,
    mu: DVector<f64>,
    theta: DVector<f64>,
}

impl LiftedPoint {
    /// Validates sizes against `nlp` and requires `z ≥ 0`.
    pub fn new(
        nlp: &ParametricNlp,
        x: DVector<f64>,
        z: DVector<f64>,
        mu: DVector<f64>,
        theta: DVector<f64>,
    ) -> Result<Self> {
        let d = nlp.dims();
        check_len("primal vector", d.n_x, x.len())?;
        check_len("slack vector", d.n_in, z.len())?;
        check_len("stacked multipliers", d.n_in + d.n_eq, mu.len())?;
        check_len("parameter vector", d.n_theta, theta.len())?;
        if let Some(i) = z.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidProblem(format!("slack {i} is negative ({:.3e})", z[i])));
        }
        Ok(LiftedPoint { x, z, mu, theta })
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }
    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }
    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }
    pub fn lambda(&self) -> DVector<f64> {
        self.mu.rows(0, self.z.len()).into_owned()
    }
    pub fn nu(&self) -> DVector<f64> {
        self.mu.rows(self.z.len(), self.mu.len() - self.z.len()).into_owned()
    }
}

/// Lifts a feasible point: `z_i = √max(0, −2 g_i(x))`, `μ = (λ, ν)`.
///
/// Constraint values up to the default activity tolerance above zero are
/// clamped to `z_i = 0`; larger violations are rejected.
pub fn lift_to_slack(nlp: &ParametricNlp, pt: &PrimalDualPoint) -> Result<LiftedPoint> {
    let v = nlp.values(pt.x().as_slice(), pt.theta().as_slice())?;
    if let Some((index, &value)) = v
        .inequalities
        .iter()
        .enumerate()
        .find(|(_, g)| **g > DEFAULT_ACTIVITY_TOLERANCE)
    {
        return Err(Error::InfeasiblePoint { index, value });
    }
    let z = v.inequalities.map(|g| (-2.0 * g).max(0.0).sqrt());
    let mut mu = DVector::zeros(pt.lambda().len() + pt.nu().len());
    mu.rows_mut(0, pt.lambda().len()).copy_from(pt.lambda());
    mu.rows_mut(pt.lambda().len(), pt.nu().len()).copy_from(pt.nu());
    Ok(LiftedPoint {
        x: pt.x().clone(),
        z,
        mu,
        theta: pt.theta().clone(),
    })
}

/// Squared Euclidean norm of the lifted KKT map
/// `(∇f + μᵀ∇c(x, 0), diag(λ) z, c(x, z))` at `lifted.theta`.
pub fn kkt_p2_residual(nlp: &ParametricNlp, lifted: &LiftedPoint) -> Result<f64> {
    let lambda = lifted.lambda();
    let nu = lifted.nu();
    let der = nlp.derivatives(
        lifted.x.as_slice(),
        lifted.theta.as_slice(),
        lambda.as_slice(),
        nu.as_slice(),
    )?;
    let stationarity = &der.objective_gradient
        + der.inequality_jacobian.tr_mul(&lambda)
        + der.equality_jacobian.tr_mul(&nu);
    let mut sq = stationarity.norm_squared();
    for i in 0..lifted.z.len() {
        let zi = lifted.z[i];
        sq += (lambda[i] * zi).powi(2);
        sq += (der.values.inequalities[i] + 0.5 * zi * zi).powi(2);
    }
    sq += der.values.equalities.norm_squared();
    Ok(sq)
}

/// First-order prediction `ξ + ∇_θξ · δθ` at `θ + δθ`. Predicted slacks are
/// clamped at zero.
pub fn predict_solution(
    lifted: &LiftedPoint,
    sens: &SensitivityResult,
    delta_theta: &DVector<f64>,
) -> Result<LiftedPoint> {
    let dual = sens
        .dual_sensitivities
        .as_ref()
        .ok_or(Error::MissingDualSensitivities)?;
    check_len("parameter increment", lifted.theta.len(), delta_theta.len())?;
    check_len("sensitivity rows", lifted.x.len(), sens.dx_dtheta.nrows())?;
    let x = &lifted.x + &sens.dx_dtheta * delta_theta;
    let z = (&lifted.z + &dual.z * delta_theta).map(|v| v.max(0.0));
    let n_in = lifted.z.len();
    let mut mu = lifted.mu.clone();
    let dl = &dual.lambda * delta_theta;
    let dn = &dual.nu * delta_theta;
    for i in 0..n_in {
        mu[i] += dl[i];
    }
    for j in 0..dn.len() {
        mu[n_in + j] += dn[j];
    }
    Ok(LiftedPoint {
        x,
        z,
        mu,
        theta: &lifted.theta + delta_theta,
    })
}

/// ∞-norm of the KKT residual of the proximal problem anchored at `anchor`
/// with weight `ρ`, evaluated at `point` with constraint multipliers `ψ`:
///
/// ```text
/// ∇f + ρ(x − x̄) + ∇c(x, 0)ᵀψ = 0
/// diag(ψ_in) z + ρ(z − z̄)    = 0
/// ρ(μ − ψ)                   = 0
/// c(x, z) + ρ(μ̄ − μ)         = 0
/// ```
pub fn p3_kkt_residual(
    nlp: &ParametricNlp,
    point: &LiftedPoint,
    psi: &DVector<f64>,
    anchor: &LiftedPoint,
    rho: f64,
) -> Result<f64> {
    let n_in = point.z.len();
    check_len("proximal multipliers", point.mu.len(), psi.len())?;
    let psi_in = psi.rows(0, n_in).into_owned();
    let psi_eq = psi.rows(n_in, psi.len() - n_in).into_owned();
    let der = nlp.derivatives(
        point.x.as_slice(),
        point.theta.as_slice(),
        psi_in.as_slice(),
        psi_eq.as_slice(),
    )?;
    let r1 = &der.objective_gradient
        + rho * (&point.x - &anchor.x)
        + der.inequality_jacobian.tr_mul(&psi_in)
        + der.equality_jacobian.tr_mul(&psi_eq);
    let mut worst = r1.amax();
    for i in 0..n_in {
        let r2 = psi_in[i] * point.z[i] + rho * (point.z[i] - anchor.z[i]);
        let r4 = der.values.inequalities[i] + 0.5 * point.z[i] * point.z[i]
            + rho * (anchor.mu[i] - point.mu[i]);
        worst = worst.max(r2.abs()).max(r4.abs());
    }
    for j in 0..psi_eq.len() {
        let r4 = der.values.equalities[j] + rho * (anchor.mu[n_in + j] - point.mu[n_in + j]);
        worst = worst.max(r4.abs());
    }
    let r3 = rho * (&point.mu - psi).amax();
    Ok(worst.max(r3))
}

/// Constraint Jacobian `[B  −ρI]` of the proximal problem with respect to
/// `(x, z, μ)`, where `B = [[∇g, diag(z)], [∇h, 0]]`.
pub fn lemma2_constraint_matrix(
    nlp: &ParametricNlp,
    lifted: &LiftedPoint,
    rho: f64,
) -> Result<DMatrix<f64>> {
    let d = nlp.dims();
    let der = nlp.derivatives(
        lifted.x.as_slice(),
        lifted.theta.as_slice(),
        lifted.lambda().as_slice(),
        lifted.nu().as_slice(),
    )?;
    let n_mu = d.n_in + d.n_eq;
    let mut m = DMatrix::zeros(n_mu, d.n_x + d.n_in + n_mu);
    m.view_mut((0, 0), (d.n_in, d.n_x))
        .copy_from(&der.inequality_jacobian);
    m.view_mut((d.n_in, 0), (d.n_eq, d.n_x))
        .copy_from(&der.equality_jacobian);
    for i in 0..d.n_in {
        m[(i, d.n_x + i)] = lifted.z[i];
    }
    for i in 0..n_mu {
        m[(i, d.n_x + d.n_in + i)] = -rho;
    }
    Ok(m)
}
