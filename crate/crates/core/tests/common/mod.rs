#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;

use nlpsens::model::{AutoDiff, Dims, ParametricNlp, PrimalDualPoint, Scalar, SmoothNlp};

/// Strictly convex nonlinear problem with one active and one inactive
/// inequality and one equality at θ = (1, 0.5).
pub struct Mixed;

impl SmoothNlp for Mixed {
    fn dims(&self) -> Dims {
        Dims { n_x: 3, n_in: 2, n_eq: 1, n_theta: 2 }
    }
    fn objective<S: Scalar>(&self, x: &[S], t: &[S]) -> S {
        (x[0] - t[0]).square() + (x[1] - t[1]).square() * 0.5 + x[2].square() * 1.5
            + x[0] * x[1] * 0.2
            + (x[0] * 0.3).exp() * 0.1
    }
    fn inequalities<S: Scalar>(&self, x: &[S], t: &[S]) -> Vec<S> {
        vec![x[0] - t[0] * 0.6, x[1] * x[1] + x[2] - 2.0]
    }
    fn equalities<S: Scalar>(&self, x: &[S], t: &[S]) -> Vec<S> {
        vec![x[0] + x[1] * 0.5 - x[2] * 2.0 - t[1] * t[0] * 0.3]
    }
}

pub const MIXED_THETA: [f64; 2] = [1.0, 0.5];

pub fn mixed() -> ParametricNlp {
    ParametricNlp::new("mixed", AutoDiff::<_, 5>::new(Mixed), &MIXED_THETA).unwrap()
}

pub const QP_N: usize = 4;
pub const QP_M: usize = 3;
pub const QP_THETA: [f64; 2] = [0.3, -0.2];

/// `min ½xᵀQx + (c + Dθ)ᵀx  s.t.  Ax − b − Eθ ≤ 0,  aᵀx − β − eᵀθ = 0`.
#[derive(Clone, Debug)]
pub struct RandomQp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub d: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub e: DMatrix<f64>,
    pub a_eq: DVector<f64>,
    pub b_eq: f64,
    pub e_eq: DVector<f64>,
    /// Known KKT point at `QP_THETA`.
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub nu: f64,
    pub active: Vec<usize>,
}

fn affine<S: Scalar>(row: impl Iterator<Item = f64>, x: &[S]) -> S {
    row.zip(x).fold(S::zero(), |acc, (a, &xi)| acc + xi * a)
}

impl SmoothNlp for RandomQp {
    fn dims(&self) -> Dims {
        Dims { n_x: QP_N, n_in: QP_M, n_eq: 1, n_theta: 2 }
    }
    fn objective<S: Scalar>(&self, x: &[S], t: &[S]) -> S {
        let mut f = S::zero();
        for i in 0..QP_N {
            f += x[i] * affine(self.q.row(i).iter().copied(), x) * 0.5;
            f += x[i] * (affine(self.d.row(i).iter().copied(), t) + self.c[i]);
        }
        f
    }
    fn inequalities<S: Scalar>(&self, x: &[S], t: &[S]) -> Vec<S> {
        (0..QP_M)
            .map(|i| {
                affine(self.a.row(i).iter().copied(), x)
                    - affine(self.e.row(i).iter().copied(), t)
                    - self.b[i]
            })
            .collect()
    }
    fn equalities<S: Scalar>(&self, x: &[S], t: &[S]) -> Vec<S> {
        vec![affine(self.a_eq.iter().copied(), x) - affine(self.e_eq.iter().copied(), t) - self.b_eq]
    }
}

impl RandomQp {
    pub fn nlp(&self) -> ParametricNlp {
        ParametricNlp::new("random-qp", AutoDiff::<_, 6>::new(self.clone()), &QP_THETA).unwrap()
    }

    pub fn known_point(&self, nlp: &ParametricNlp) -> PrimalDualPoint {
        PrimalDualPoint::new(
            nlp,
            DVector::from_column_slice(&QP_THETA),
            self.x.clone(),
            self.lambda.clone(),
            DVector::from_vec(vec![self.nu]),
        )
        .unwrap()
    }

    /// Rows of the active constraint Jacobian, equality first.
    pub fn active_jacobian(&self) -> DMatrix<f64> {
        let mut rows = vec![self.a_eq.transpose()];
        rows.extend(self.active.iter().map(|&i| self.a.row(i).into_owned()));
        DMatrix::from_rows(&rows)
    }
}

fn unit(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, n)
}

/// Strictly convex QPs with LICQ and strict complementarity at a planted
/// KKT point.
pub fn random_qp() -> impl Strategy<Value = RandomQp> {
    (
        unit(QP_N * QP_N),
        unit(QP_M * QP_N + QP_N),
        unit(QP_N * 2 + QP_M * 2 + 2),
        unit(QP_N + 1),
        prop::collection::vec(0.5..2.0f64, QP_M),
        0..=QP_M,
    )
        .prop_map(|(l, rows, sens, xnu, mult, n_active)| {
            let l = DMatrix::from_fn(QP_N, QP_N, |i, j| if j <= i { l[i * QP_N + j] } else { 0.0 });
            let q = &l * l.transpose() + DMatrix::identity(QP_N, QP_N) * 0.5;
            let a = DMatrix::from_row_slice(QP_M, QP_N, &rows[..QP_M * QP_N]);
            let a_eq = DVector::from_column_slice(&rows[QP_M * QP_N..]);
            let d = DMatrix::from_row_slice(QP_N, 2, &sens[..QP_N * 2]);
            let e = DMatrix::from_row_slice(QP_M, 2, &sens[QP_N * 2..QP_N * 2 + QP_M * 2]);
            let e_eq = DVector::from_column_slice(&sens[QP_N * 2 + QP_M * 2..]);
            let x = DVector::from_column_slice(&xnu[..QP_N]);
            let nu = xnu[QP_N];
            let t = DVector::from_column_slice(&QP_THETA);
            let active: Vec<usize> = (0..n_active).collect();
            let lambda = DVector::from_fn(QP_M, |i, _| if i < n_active { mult[i] } else { 0.0 });
            let slack = DVector::from_fn(QP_M, |i, _| if i < n_active { 0.0 } else { mult[i] });
            let b = &a * &x - &e * &t + slack;
            let b_eq = a_eq.dot(&x) - e_eq.dot(&t);
            let c = -(&q * &x + &d * &t + a.tr_mul(&lambda) + &a_eq * nu);
            RandomQp { q, c, d, a, b, e, a_eq, b_eq, e_eq, x, lambda, nu, active }
        })
        .prop_filter("LICQ", |qp| {
            let j = qp.active_jacobian();
            j.svd(false, false).singular_values.min() > 1e-2
        })
}

/// `count` deterministic draws from a strategy.
pub fn sample<S: Strategy>(strategy: S, count: usize) -> Vec<S::Value> {
    let mut runner = TestRunner::deterministic();
    (0..count)
        .map(|_| strategy.new_tree(&mut runner).unwrap().current())
        .collect()
}

/// Least-squares slope of `log10 y` against `log10 x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.log10()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.log10()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub fn relative_inf(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    nlpsens::oracle::compare_matrices(a, b).unwrap().relative_error_inf
}
