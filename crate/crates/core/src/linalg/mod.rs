//! Dense linear algebra kernels shared by the solver and sensitivity code.

mod ldlt;
mod qr;

pub use ldlt::{Inertia, LdltFactor};
pub use qr::{min_norm_lstsq, min_norm_lstsq_vec, null_space, PivotedQr};

use nalgebra::{DMatrix, DVector};

/// Induced ∞-norm (maximum absolute row sum).
pub fn inf_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.nrows())
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn vec_inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// Largest absolute deviation from symmetry.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in j + 1..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// ∞-norm condition number `‖A‖∞ ‖A⁻¹‖∞` of a symmetric matrix from its
/// factorization. Small systems are inverted exactly; large ones use
/// Hager's 1-norm estimator (for symmetric `A` both norms coincide).
pub fn condition_inf(a: &DMatrix<f64>, factor: &LdltFactor) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let anorm = inf_norm(a);
    let inv_norm = if n <= 400 {
        inf_norm(&factor.solve_matrix(&DMatrix::identity(n, n)))
    } else {
        hager_inverse_norm(factor, n)
    };
    if !inv_norm.is_finite() {
        return f64::INFINITY;
    }
    anorm * inv_norm
}

/// Estimates `‖A⁻¹‖₁` for symmetric `A` using Hager's algorithm.
fn hager_inverse_norm(factor: &LdltFactor, n: usize) -> f64 {
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut estimate = 0.0;
    for _ in 0..5 {
        let y = factor.solve(&x);
        let norm1 = y.iter().map(|v| v.abs()).sum::<f64>();
        if !norm1.is_finite() {
            return f64::INFINITY;
        }
        if norm1 <= estimate {
            break;
        }
        estimate = norm1;
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let z = factor.solve(&xi);
        let (jmax, zmax) = z
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bj, bv), (j, v)| {
                if v.abs() > bv {
                    (j, v.abs())
                } else {
                    (bj, bv)
                }
            });
        if zmax <= z.dot(&x) {
            break;
        }
        x.fill(0.0);
        x[jmax] = 1.0;
    }
    estimate
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inf_norm_is_max_row_sum() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -3.0, 2.0, 0.5]);
        assert_eq!(inf_norm(&a), 4.0);
    }

    #[test]
    fn condition_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, -0.5, 2.0]));
        let f = LdltFactor::factor(&a);
        assert!((condition_inf(&a, &f) - 8.0).abs() < 1e-12);
        assert!((hager_inverse_norm(&f, 3) - 2.0).abs() < 1e-12);
    }
}
