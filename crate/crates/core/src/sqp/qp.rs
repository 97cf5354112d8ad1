//! Dense dual active-set QP subsolver.
//!
//! Solves
//!
//! ```text
//! minimize ½ pᵀHp + gᵀp   s.t.  A_e p = r_e,  A_i p ≤ r_i
//! ```
//!
//! with `H` positive definite on the null space of `A_e`. The equality KKT
//! matrix `K = [[H, A_eᵀ], [A_e, 0]]` is factored once; inequality
//! constraints in the working set are handled through the Schur complement
//! `S = Ā_W K⁻¹ Ā_Wᵀ`, which is positive definite whenever the working-set
//! normals are independent modulo the equalities. Iterates stay dual
//! feasible (Goldfarb–Idnani): the most violated constraint is added, and
//! blocking working-set constraints whose multipliers reach zero are dropped.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{Inertia, LdltFactor};

/// Factored equality-constrained KKT matrix.
pub(crate) struct EqualityKkt {
    factor: LdltFactor,
    n: usize,
    m: usize,
}

impl EqualityKkt {
    /// Factors `[[H, A_eᵀ], [A_e, -dual_reg·I]]` and reports its inertia.
    pub fn factor(h: &DMatrix<f64>, a_eq: &DMatrix<f64>, dual_reg: f64) -> (Self, Inertia) {
        let n = h.nrows();
        let m = a_eq.nrows();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(h);
        k.view_mut((n, 0), (m, n)).copy_from(a_eq);
        k.view_mut((0, n), (n, m)).copy_from(&a_eq.transpose());
        for i in 0..m {
            k[(n + i, n + i)] = -dual_reg;
        }
        let factor = LdltFactor::factor(&k);
        let zero_tol = 1e-13 * factor.scale().max(1.0);
        let inertia = factor.inertia(zero_tol);
        (EqualityKkt { factor, n, m }, inertia)
    }

    pub fn has_correct_inertia(&self, inertia: Inertia) -> bool {
        inertia.positive == self.n && inertia.negative == self.m && inertia.zero == 0
    }

    fn solve(&self, rhs: &mut [f64]) {
        self.factor.solve_in_place(rhs);
    }
}

pub(crate) struct QpData<'a> {
    pub g: &'a DVector<f64>,
    pub r_eq: &'a DVector<f64>,
    pub a_in: &'a DMatrix<f64>,
    pub r_in: &'a DVector<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct QpSolution {
    pub p: DVector<f64>,
    /// Equality multipliers: `Hp + g + A_eᵀy + A_iᵀλ = 0`.
    pub y: DVector<f64>,
    pub lambda: DVector<f64>,
    pub working_set: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum QpError {
    Infeasible,
    MaxIterations,
}

/// Working set with cached `K⁻¹ āⱼ` columns and a Cholesky factor of `S`.
struct WorkingSet {
    indices: Vec<usize>,
    u: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
}

impl WorkingSet {
    fn new() -> Self {
        WorkingSet {
            indices: Vec::new(),
            u: Vec::new(),
            s: Vec::new(),
            chol: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.indices.len()
    }

    /// Solves `S z = b` with the Cholesky factor.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let k = self.len();
        let mut z = b.to_vec();
        for i in 0..k {
            let mut v = z[i];
            for j in 0..i {
                v -= self.chol[i][j] * z[j];
            }
            z[i] = v / self.chol[i][i];
        }
        for i in (0..k).rev() {
            let mut v = z[i];
            for j in i + 1..k {
                v -= self.chol[j][i] * z[j];
            }
            z[i] = v / self.chol[i][i];
        }
        z
    }

    /// Appends a constraint given its Schur row `s_row` (against the current
    /// members), diagonal `s_qq` and cached column `u`. Returns false and
    /// leaves the set unchanged when the normal is numerically dependent.
    fn push(&mut self, index: usize, s_row: Vec<f64>, s_qq: f64, u: Vec<f64>) -> bool {
        let k = self.len();
        let mut l = vec![0.0; k + 1];
        let mut sq = 0.0;
        for i in 0..k {
            let mut v = s_row[i];
            for j in 0..i {
                v -= self.chol[i][j] * l[j];
            }
            l[i] = v / self.chol[i][i];
            sq += l[i] * l[i];
        }
        let d = s_qq - sq;
        if !(d > DEPENDENCE_TOL * s_qq.abs().max(f64::MIN_POSITIVE)) {
            return false;
        }
        l[k] = d.sqrt();
        for (i, row) in self.s.iter_mut().enumerate() {
            row.push(s_row[i]);
        }
        let mut new_row = s_row;
        new_row.push(s_qq);
        self.s.push(new_row);
        self.chol.push(l);
        self.indices.push(index);
        self.u.push(u);
        true
    }

    fn remove(&mut self, pos: usize) {
        self.indices.remove(pos);
        self.u.remove(pos);
        self.s.remove(pos);
        for row in self.s.iter_mut() {
            row.remove(pos);
        }
        self.refactor();
    }

    fn refactor(&mut self) {
        let k = self.len();
        let mut chol = vec![vec![0.0; 0]; k];
        for i in 0..k {
            let mut row = vec![0.0; i + 1];
            for j in 0..=i {
                let mut v = self.s[i][j];
                for p in 0..j {
                    let other = if j == i { row[p] } else { chol[j][p] };
                    v -= row[p] * other;
                }
                if i == j {
                    row[i] = v.max(f64::MIN_POSITIVE).sqrt();
                } else {
                    row[j] = v / chol[j][j];
                }
            }
            chol[i] = row;
        }
        self.chol = chol;
    }
}

const DEPENDENCE_TOL: f64 = 1e-11;
const NEGLIGIBLE_VIOLATION: f64 = 1e-9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn solve_qp(
    kkt: &EqualityKkt,
    qp: &QpData<'_>,
    warm_start: &[usize],
    max_iterations: usize,
) -> Result<QpSolution, QpError> {
    let n = kkt.n;
    let m = kkt.m;
    let n_in = qp.a_in.nrows();
    let rows: Vec<Vec<f64>> = (0..n_in)
        .map(|i| qp.a_in.row(i).iter().copied().collect())
        .collect();
    let row_norm: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().fold(0.0_f64, |a, v| a.max(v.abs())))
        .collect();

    let column = |i: usize| -> Vec<f64> {
        let mut u = vec![0.0; n + m];
        u[..n].copy_from_slice(&rows[i]);
        kkt.solve(&mut u);
        u
    };

    let mut w0 = vec![0.0; n + m];
    for i in 0..n {
        w0[i] = -qp.g[i];
    }
    for i in 0..m {
        w0[n + i] = qp.r_eq[i];
    }
    kkt.solve(&mut w0);

    let mut ws = WorkingSet::new();
    let mut in_set = vec![false; n_in];
    for &i in warm_start {
        if i >= n_in || in_set[i] {
            continue;
        }
        let u = column(i);
        let s_row: Vec<f64> = ws.indices.iter().map(|&j| dot(&rows[j], &u[..n])).collect();
        let s_qq = dot(&rows[i], &u[..n]);
        if ws.push(i, s_row, s_qq, u) {
            in_set[i] = true;
        }
    }

    // Equality-QP solution for the current working set.
    let eqp = |ws: &WorkingSet| -> (Vec<f64>, Vec<f64>) {
        let rhs: Vec<f64> = ws
            .indices
            .iter()
            .map(|&j| dot(&rows[j], &w0[..n]) - qp.r_in[j])
            .collect();
        let lam = ws.solve(&rhs);
        let mut w = w0.clone();
        for (l, u) in lam.iter().zip(&ws.u) {
            for (wi, ui) in w.iter_mut().zip(u) {
                *wi -= l * ui;
            }
        }
        (w, lam)
    };

    // Restore dual feasibility of the warm start.
    let (mut w, mut lam) = loop {
        let (w, lam) = eqp(&ws);
        match lam
            .iter()
            .enumerate()
            .filter(|(_, v)| **v < 0.0)
            .min_by(|a, b| a.1.total_cmp(b.1))
        {
            Some((pos, _)) => {
                in_set[ws.indices[pos]] = false;
                ws.remove(pos);
            }
            None => break (w, lam),
        }
    };

    // Dependent constraints violated only at rounding level are skipped
    // instead of declaring the QP infeasible.
    let mut skipped = vec![false; n_in];
    let mut iterations = 0;
    'outer: loop {
        let p = &w[..n];
        let p_norm = p.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..n_in {
            if in_set[i] || skipped[i] {
                continue;
            }
            let viol = dot(&rows[i], p) - qp.r_in[i];
            let tol = 1e-12 * (1.0 + qp.r_in[i].abs() + row_norm[i] * p_norm);
            if viol > tol && worst.is_none_or(|(_, v)| viol > v) {
                worst = Some((i, viol));
            }
        }
        let Some((q, _)) = worst else {
            break;
        };

        let u_q = column(q);
        let s_qq = dot(&rows[q], &u_q[..n]);
        let mut lam_q = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iterations {
                return Err(QpError::MaxIterations);
            }
            let s_q: Vec<f64> = ws.indices.iter().map(|&j| dot(&rows[j], &u_q[..n])).collect();
            let sinv_sq = ws.solve(&s_q);
            let dlam: Vec<f64> = sinv_sq.iter().map(|v| -v).collect();
            let gamma = s_qq - dot(&s_q, &sinv_sq);
            let viol = dot(&rows[q], &w[..n]) - qp.r_in[q];

            let t_full = if gamma > DEPENDENCE_TOL * s_qq.abs().max(f64::MIN_POSITIVE) {
                (viol / gamma).max(0.0)
            } else {
                f64::INFINITY
            };
            let mut t_part = f64::INFINITY;
            let mut block = None;
            for (pos, (&l, &dl)) in lam.iter().zip(&dlam).enumerate() {
                if dl < 0.0 {
                    let t = (l / -dl).max(0.0);
                    if t < t_part {
                        t_part = t;
                        block = Some(pos);
                    }
                }
            }
            if !t_full.is_finite() && !t_part.is_finite() {
                if viol <= NEGLIGIBLE_VIOLATION * (1.0 + qp.r_in[q].abs()) {
                    skipped[q] = true;
                    let (w_new, lam_new) = eqp(&ws);
                    w = w_new;
                    lam = lam_new.into_iter().map(|v| v.max(0.0)).collect();
                    continue 'outer;
                }
                return Err(QpError::Infeasible);
            }
            let t = t_full.min(t_part);

            // w += t·dw with dw = -u_q - Σ dλ_j u_j.
            for (wi, ui) in w.iter_mut().zip(&u_q) {
                *wi -= t * ui;
            }
            for (dl, u) in dlam.iter().zip(&ws.u) {
                let c = t * dl;
                if c != 0.0 {
                    for (wi, ui) in w.iter_mut().zip(u) {
                        *wi -= c * ui;
                    }
                }
            }
            for (l, dl) in lam.iter_mut().zip(&dlam) {
                *l += t * dl;
            }
            lam_q += t;

            if t_full <= t_part {
                let u = u_q.clone();
                if ws.push(q, s_q, s_qq, u) {
                    in_set[q] = true;
                    let (w_new, lam_new) = eqp(&ws);
                    w = w_new;
                    lam = lam_new.into_iter().map(|v| v.max(0.0)).collect();
                } else {
                    // Numerically dependent after all: keep the shifted point.
                    lam.push(lam_q);
                    return Err(QpError::Infeasible);
                }
                break;
            }
            let pos = block.expect("partial step has a blocking constraint");
            in_set[ws.indices[pos]] = false;
            ws.remove(pos);
            lam.remove(pos);
        }
    }

    let mut lambda = DVector::zeros(n_in);
    for (&i, &l) in ws.indices.iter().zip(&lam) {
        lambda[i] = l.max(0.0);
    }
    Ok(QpSolution {
        p: DVector::from_column_slice(&w[..n]),
        y: DVector::from_column_slice(&w[n..]),
        lambda,
        working_set: ws.indices.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(
        h: DMatrix<f64>,
        g: Vec<f64>,
        a_eq: DMatrix<f64>,
        r_eq: Vec<f64>,
        a_in: DMatrix<f64>,
        r_in: Vec<f64>,
        warm: &[usize],
    ) -> Result<QpSolution, QpError> {
        let (kkt, inertia) = EqualityKkt::factor(&h, &a_eq, 0.0);
        assert!(kkt.has_correct_inertia(inertia));
        let g = DVector::from_vec(g);
        let r_eq = DVector::from_vec(r_eq);
        let r_in = DVector::from_vec(r_in);
        solve_qp(
            &kkt,
            &QpData {
                g: &g,
                r_eq: &r_eq,
                a_in: &a_in,
                r_in: &r_in,
            },
            warm,
            100,
        )
    }

    #[test]
    fn working_set_refactors_after_removal() {
        let s = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let mut ws = WorkingSet::new();
        for k in 0..3 {
            assert!(ws.push(k, s[k][..k].to_vec(), s[k][k], vec![0.0]));
        }
        ws.remove(1);
        let z = ws.solve(&[1.0, 2.0]);
        // [[4, 0.5], [0.5, 2]] z = (1, 2).
        let det = 4.0 * 2.0 - 0.25;
        assert!((z[0] - (2.0 - 1.0) / det).abs() < 1e-14);
        assert!((z[1] - (8.0 - 0.5) / det).abs() < 1e-14);
    }

    #[test]
    fn box_constrained_projection() {
        // min ½‖p − (2, −3)‖² s.t. −1 ≤ p ≤ 1.
        let a_in = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        let sol = solve(
            DMatrix::identity(2, 2),
            vec![-2.0, 3.0],
            DMatrix::zeros(0, 2),
            vec![],
            a_in,
            vec![1.0; 4],
            &[],
        )
        .unwrap();
        assert!((sol.p[0] - 1.0).abs() < 1e-14 && (sol.p[1] + 1.0).abs() < 1e-14);
        assert!((sol.lambda[0] - 1.0).abs() < 1e-14);
        assert!((sol.lambda[3] - 2.0).abs() < 1e-14);
        assert_eq!(sol.lambda[1], 0.0);
    }

    #[test]
    fn equality_and_inequality_with_warm_start_drop() {
        // min ½‖p‖² − p₁ s.t. p₁ + p₂ = 1, p₂ ≥ 0.2 (−p₂ ≤ −0.2), p₁ ≤ 5.
        let a_in = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        for warm in [&[][..], &[0, 1][..], &[1][..]] {
            let sol = solve(
                DMatrix::identity(2, 2),
                vec![-1.0, 0.0],
                DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                vec![1.0],
                a_in.clone(),
                vec![-0.2, 5.0],
                warm,
            )
            .unwrap();
            // Unconstrained-in-p₂ optimum is (1, 0); the bound moves it to (0.8, 0.2).
            assert!((sol.p[0] - 0.8).abs() < 1e-13, "{warm:?}");
            assert!((sol.p[1] - 0.2).abs() < 1e-13);
            assert_eq!(sol.working_set, vec![0]);
            // Stationarity: p + g + y·(1,1) + λ₀·(0,−1) = 0.
            let y = sol.y[0];
            assert!((0.8 - 1.0 + y).abs() < 1e-13);
            assert!((0.2 + y - sol.lambda[0]).abs() < 1e-13);
        }
    }

    #[test]
    fn detects_infeasibility() {
        // p ≤ −1 and −p ≤ −1 (p ≥ 1).
        let a_in = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let err = solve(
            DMatrix::identity(1, 1),
            vec![0.0],
            DMatrix::zeros(0, 1),
            vec![],
            a_in,
            vec![-1.0, -1.0],
            &[],
        )
        .unwrap_err();
        assert_eq!(err, QpError::Infeasible);
    }

    #[test]
    fn semidefinite_hessian_convex_on_null_space() {
        // H = diag(1, 0) is indefinite-free but singular; the equality makes
        // the QP strictly convex: min ½p₁² + p₂ s.t. p₁ − p₂ = 0, p₂ ≥ −3.
        let a_in = DMatrix::from_row_slice(1, 2, &[0.0, -1.0]);
        let sol = solve(
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])),
            vec![0.0, 1.0],
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            vec![0.0],
            a_in,
            vec![3.0],
            &[],
        )
        .unwrap();
        assert!((sol.p[0] + 1.0).abs() < 1e-13);
        assert!((sol.p[1] + 1.0).abs() < 1e-13);
        assert_eq!(sol.lambda[0], 0.0);
    }
}
