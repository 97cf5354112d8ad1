use std::marker::PhantomData;

use nalgebra::{DMatrix, DVector};

use super::autodiff::{Jet, Scalar};
use super::{Derivatives, Dims, NlpEvaluator, Values};

/// A parametric NLP written once, generically over the scalar type.
///
/// Implementations must be twice continuously differentiable in `(x, θ)`;
/// all derivatives come from evaluating the same code on [`Jet`]s.
pub trait SmoothNlp: Send + Sync {
    fn dims(&self) -> Dims;

    fn objective<S: Scalar>(&self, x: &[S], theta: &[S]) -> S;

    /// Inequalities in the convention `g ≤ 0`.
    fn inequalities<S: Scalar>(&self, x: &[S], theta: &[S]) -> Vec<S>;

    fn equalities<S: Scalar>(&self, x: &[S], theta: &[S]) -> Vec<S>;

    fn initial_primal(&self, _theta: &[f64]) -> Option<DVector<f64>> {
        None
    }
}

/// Forward-mode derivative evaluator for a [`SmoothNlp`].
///
/// `N` must equal `n_x + n_θ`: every evaluation seeds one jet variable per
/// primal and parameter coordinate, so a single pass produces gradients,
/// Hessians and the mixed θx terms.
pub struct AutoDiff<P, const N: usize> {
    problem: P,
    _marker: PhantomData<[(); N]>,
}

impl<P: SmoothNlp, const N: usize> AutoDiff<P, N> {
    /// Panics if `N != n_x + n_θ`.
    pub fn new(problem: P) -> Self {
        let d = problem.dims();
        assert_eq!(
            d.n_x + d.n_theta,
            N,
            "jet width must equal n_x + n_theta"
        );
        AutoDiff {
            problem,
            _marker: PhantomData,
        }
    }

    pub fn problem(&self) -> &P {
        &self.problem
    }
}

impl<P: SmoothNlp, const N: usize> NlpEvaluator for AutoDiff<P, N> {
    fn dims(&self) -> Dims {
        self.problem.dims()
    }

    fn values(&self, x: &[f64], theta: &[f64]) -> Values {
        Values {
            objective: self.problem.objective(x, theta),
            inequalities: DVector::from_vec(self.problem.inequalities(x, theta)),
            equalities: DVector::from_vec(self.problem.equalities(x, theta)),
        }
    }

    fn derivatives(&self, x: &[f64], theta: &[f64], lambda: &[f64], nu: &[f64]) -> Derivatives {
        let d = self.problem.dims();
        let nx = d.n_x;
        let nt = d.n_theta;
        let mut z = [0.0; N];
        z[..nx].copy_from_slice(x);
        z[nx..].copy_from_slice(theta);
        let seeded = Jet::<N>::seed(&z);
        let (xs, ts) = seeded.split_at(nx);

        let f = self.problem.objective(xs, ts);
        let g = self.problem.inequalities(xs, ts);
        let h = self.problem.equalities(xs, ts);

        let mut lag = f;
        for (gi, &li) in g.iter().zip(lambda) {
            lag += *gi * li;
        }
        for (hj, &nj) in h.iter().zip(nu) {
            lag += *hj * nj;
        }

        let jac = |rows: &[Jet<N>], offset: usize, width: usize| {
            DMatrix::from_fn(rows.len(), width, |i, j| rows[i].grad[offset + j])
        };

        Derivatives {
            values: Values {
                objective: f.value,
                inequalities: DVector::from_iterator(g.len(), g.iter().map(|j| j.value)),
                equalities: DVector::from_iterator(h.len(), h.iter().map(|j| j.value)),
            },
            objective_gradient: DVector::from_fn(nx, |i, _| f.grad[i]),
            inequality_jacobian: jac(&g, 0, nx),
            equality_jacobian: jac(&h, 0, nx),
            lagrangian_hessian: DMatrix::from_fn(nx, nx, |i, j| lag.hess[i][j]),
            lagrangian_theta_cross: DMatrix::from_fn(nx, nt, |i, k| lag.hess[i][nx + k]),
            inequality_theta_jacobian: jac(&g, nx, nt),
            equality_theta_jacobian: jac(&h, nx, nt),
        }
    }

    fn initial_primal(&self, theta: &[f64]) -> Option<DVector<f64>> {
        self.problem.initial_primal(theta)
    }
}
