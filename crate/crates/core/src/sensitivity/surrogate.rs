use nalgebra::DMatrix;
#[cfg(test)]
use nalgebra::DVector;
use serde::Serialize;

use super::{
    classical_system, lift_to_slack, residual_inf, Diagnostics, DualSensitivities, LiftedPoint,
    SensitivityMethod, SensitivityResult, ILL_CONDITIONED_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::linalg::{self, LdltFactor};
use crate::model::{
    evaluate_kkt, ActiveSetPartition, ParametricNlp, PrimalDualPoint, DEFAULT_ACTIVITY_TOLERANCE,
};

/// Regularized sensitivity system, solved as `matrix · V = −rhs`.
///
/// With `W = diag(ρ / (z̄ᵢ² + ρ²))` over the inactive constraints,
/// `H = ∇g_Īᵀ W ∇g_Ī` and `l = ∇g_Īᵀ W ∇_θg_Ī`. Then
/// `matrix = A + diag(H + ρI, −ρI, −ρI)` and `rhs = b + col(l, 0, 0)`,
/// where `(A, b)` is the classical active-set system.
#[derive(Clone, Debug, Serialize)]
pub struct SurrogateSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub rho: f64,
    pub active_partition: ActiveSetPartition,
    #[serde(skip)]
    inactive_weights: Vec<f64>,
    #[serde(skip)]
    grad_g: DMatrix<f64>,
    #[serde(skip)]
    theta_grad_g: DMatrix<f64>,
}

fn primal_dual_of(nlp: &ParametricNlp, lifted: &LiftedPoint) -> Result<PrimalDualPoint> {
    PrimalDualPoint::new(
        nlp,
        lifted.theta().clone(),
        lifted.x().clone(),
        lifted.lambda().map(|v| v.max(0.0)),
        lifted.nu(),
    )
}

pub fn assemble_surrogate_system(
    nlp: &ParametricNlp,
    lifted: &LiftedPoint,
    rho: f64,
    tolerance: f64,
) -> Result<SurrogateSystem> {
    if !(rho > 0.0) {
        return Err(Error::NonPositiveRho(rho));
    }
    let pt = primal_dual_of(nlp, lifted)?;
    let kkt = evaluate_kkt(nlp, &pt)?;
    let partition = crate::model::detect_active_set(nlp, &pt, tolerance)?;
    let (mut matrix, mut rhs) = classical_system(&kkt, &partition);

    let nx = kkt.lagrangian_hessian.nrows();
    let nt = kkt.theta_cross.ncols();
    let weights: Vec<f64> = partition
        .inactive
        .iter()
        .map(|&i| {
            let z = lifted.z()[i];
            rho / (z * z + rho * rho)
        })
        .collect();
    let mut h = DMatrix::zeros(nx, nx);
    let mut l = DMatrix::zeros(nx, nt);
    for (&i, &w) in partition.inactive.iter().zip(&weights) {
        let gi = kkt.grad_g.row(i);
        let ti = kkt.theta_grad_g.row(i);
        h.ger(w, &gi.transpose(), &gi.transpose(), 1.0);
        l.ger(w, &gi.transpose(), &ti.transpose(), 1.0);
    }
    // Exact symmetry regardless of rounding in the rank-one updates.
    for j in 0..nx {
        for i in j + 1..nx {
            let s = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = s;
            h[(j, i)] = s;
        }
    }

    let n = matrix.nrows();
    for j in 0..nx {
        for i in 0..nx {
            matrix[(i, j)] += h[(i, j)];
        }
        matrix[(j, j)] += rho;
    }
    for i in nx..n {
        matrix[(i, i)] -= rho;
    }
    for j in 0..nt {
        for i in 0..nx {
            rhs[(i, j)] += l[(i, j)];
        }
    }

    Ok(SurrogateSystem {
        matrix,
        rhs,
        h,
        l,
        rho,
        active_partition: partition,
        inactive_weights: weights,
        grad_g: kkt.grad_g,
        theta_grad_g: kkt.theta_grad_g,
    })
}

/// Regularized Jacobian of the solution map, with the slack and multiplier
/// sensitivities of the lifted problem.
///
/// A condition estimate above [`ILL_CONDITIONED_THRESHOLD`] is reported in
/// the diagnostics rather than as an error; see
/// [`SensitivityResult::check_conditioning`].
pub fn surrogate_jacobian(
    nlp: &ParametricNlp,
    pt: &PrimalDualPoint,
    rho: f64,
    tolerance: f64,
) -> Result<SensitivityResult> {
    if !(rho > 0.0) {
        return Err(Error::NonPositiveRho(rho));
    }
    let lifted = lift_to_slack(nlp, pt)?;
    let sys = assemble_surrogate_system(nlp, &lifted, rho, tolerance)?;
    let factor = LdltFactor::factor(&sys.matrix);
    let v = -factor.solve_matrix(&sys.rhs);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::IllConditioned(f64::INFINITY));
    }
    let condition = linalg::condition_inf(&sys.matrix, &factor);

    let d = nlp.dims();
    let nt = d.n_theta;
    let na = sys.active_partition.active.len();
    let dx = v.rows(0, d.n_x).into_owned();
    let lambda_all = lifted.lambda();

    let mut dlambda = DMatrix::zeros(d.n_in, nt);
    let mut dz = DMatrix::zeros(d.n_in, nt);
    for (r, &i) in sys.active_partition.active.iter().enumerate() {
        dlambda.set_row(i, &v.row(d.n_x + r));
    }
    for (&i, &w) in sys.active_partition.inactive.iter().zip(&sys.inactive_weights) {
        let dmu = (sys.grad_g.row(i) * &dx + sys.theta_grad_g.row(i)) * w;
        let scale = -lifted.z()[i] / (lambda_all[i] + rho);
        dz.set_row(i, &(&dmu * scale));
        dlambda.set_row(i, &dmu);
    }
    let dnu = v.rows(d.n_x + na, d.n_eq).into_owned();

    Ok(SensitivityResult {
        dx_dtheta: dx,
        dual_sensitivities: Some(DualSensitivities {
            lambda: dlambda,
            nu: dnu,
            z: dz,
        }),
        method: SensitivityMethod::Surrogate { rho },
        diagnostics: Diagnostics {
            condition_estimate: condition,
            linear_residual: residual_inf(&sys.matrix, &v, &sys.rhs),
            ill_conditioned: condition > ILL_CONDITIONED_THRESHOLD,
        },
    })
}

/// Constants of the linear convergence bound
/// `‖∂x − ∂ₚx‖ / ‖∂x‖ ≤ L·ρ` for `ρ ≤ ρ̄`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TheoremOneConstants {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub kappa: f64,
    pub rho_bar: f64,
    pub bound_coefficient: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Evaluates `L̃₁ = ‖∇g_Īᵀ∇g_Ī‖∞ / min z̄²`, `L̃₂` likewise with `∇_θg_Ī`,
/// `L̃₃ = max(L̃₁/‖A‖∞, L̃₂/‖b‖∞)` and `L = 2L̃₃ / (1 − ρ̄ κ(A) L̃₃)`.
/// All constants are zero when no constraint is inactive.
pub fn theorem1_constants(
    nlp: &ParametricNlp,
    lifted: &LiftedPoint,
    rho_bar: f64,
) -> Result<TheoremOneConstants> {
    if !(rho_bar > 0.0) {
        return Err(Error::NonPositiveRho(rho_bar));
    }
    let pt = primal_dual_of(nlp, lifted)?;
    let kkt = evaluate_kkt(nlp, &pt)?;
    let partition = crate::model::detect_active_set(nlp, &pt, DEFAULT_ACTIVITY_TOLERANCE)?;
    let (a, b) = classical_system(&kkt, &partition);
    let factor = LdltFactor::factor(&a);
    let kappa = linalg::condition_inf(&a, &factor);

    let inactive = &partition.inactive;
    if inactive.is_empty() {
        return Ok(TheoremOneConstants {
            l1: 0.0,
            l2: 0.0,
            l3: 0.0,
            kappa,
            rho_bar,
            bound_coefficient: 0.0,
        });
    }
    let gi = kkt.grad_g.select_rows(inactive.iter());
    let ti = kkt.theta_grad_g.select_rows(inactive.iter());
    let min_z2 = inactive
        .iter()
        .map(|&i| lifted.z()[i].powi(2))
        .fold(f64::INFINITY, f64::min);
    let l1 = linalg::inf_norm(&gi.tr_mul(&gi)) / min_z2;
    let l2 = linalg::inf_norm(&gi.tr_mul(&ti)) / min_z2;
    let l3 = ratio(l1, linalg::inf_norm(&a)).max(ratio(l2, linalg::inf_norm(&b)));
    let smallness = if l3 == 0.0 { 0.0 } else { rho_bar * kappa * l3 };
    if !(smallness < 1.0) {
        return Err(Error::BoundInapplicable(smallness));
    }
    Ok(TheoremOneConstants {
        l1,
        l2,
        l3,
        kappa,
        rho_bar,
        bound_coefficient: 2.0 * l3 / (1.0 - smallness),
    })
}

/// Stacks `(x, z, μ)` sensitivities into one matrix in lifted order.
#[cfg(test)]
fn stacked(r: &SensitivityResult) -> DMatrix<f64> {
    let d = r.dual_sensitivities.as_ref().unwrap();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for m in [&r.dx_dtheta, &d.z, &d.lambda, &d.nu] {
        for i in 0..m.nrows() {
            rows.push(m.row(i).transpose());
        }
    }
    DMatrix::from_fn(rows.len(), r.dx_dtheta.ncols(), |i, j| rows[i][j])
}
