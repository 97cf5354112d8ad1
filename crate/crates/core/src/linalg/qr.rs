//! Householder QR with column pivoting and the complete orthogonal
//! decomposition built on it: minimum-norm least squares and null spaces.

use nalgebra::{DMatrix, DVector};

/// `A P = Q R` with `Q` stored as Householder reflectors below the diagonal.
#[derive(Clone, Debug)]
pub struct PivotedQr {
    qr: DMatrix<f64>,
    tau: Vec<f64>,
    /// Column `j` of `A P` is column `perm[j]` of `A`.
    perm: Vec<usize>,
}

impl PivotedQr {
    pub fn new(a: &DMatrix<f64>) -> Self {
        householder_qr(a.clone(), true)
    }

    pub fn r_diag(&self) -> Vec<f64> {
        let k = self.qr.nrows().min(self.qr.ncols());
        (0..k).map(|i| self.qr[(i, i)]).collect()
    }

    /// Numerical rank: number of `|R_ii|` above `abs_tol`.
    pub fn rank(&self, abs_tol: f64) -> usize {
        self.r_diag().iter().take_while(|d| d.abs() > abs_tol).count()
    }

    /// Overwrites `b` (m rows) with `Qᵀ b`.
    pub fn apply_qt(&self, b: &mut DMatrix<f64>) {
        apply_reflectors(&self.qr, &self.tau, b, false);
    }

    /// Overwrites `b` (m rows) with `Q b`.
    pub fn apply_q(&self, b: &mut DMatrix<f64>) {
        apply_reflectors(&self.qr, &self.tau, b, true);
    }
}

fn householder_qr(mut a: DMatrix<f64>, pivot: bool) -> PivotedQr {
    let (m, n) = a.shape();
    let kmax = m.min(n);
    let mut tau = vec![0.0; kmax];
    let mut perm: Vec<usize> = (0..n).collect();
    let mut norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut norms_ref = norms.clone();

    for k in 0..kmax {
        if pivot {
            let p = (k..n)
                .max_by(|&i, &j| norms[i].total_cmp(&norms[j]).then(j.cmp(&i)))
                .unwrap_or(k);
            if p != k {
                a.swap_columns(k, p);
                perm.swap(k, p);
                norms.swap(k, p);
                norms_ref.swap(k, p);
            }
        }

        // Reflector annihilating a[k+1.., k].
        let data = a.as_mut_slice();
        let colk = &mut data[k * m..(k + 1) * m];
        let alpha = colk[k];
        let sigma: f64 = colk[k + 1..].iter().map(|v| v * v).sum();
        let t = if sigma == 0.0 {
            0.0
        } else {
            let norm = (alpha * alpha + sigma).sqrt();
            let beta = if alpha <= 0.0 { norm } else { -norm };
            let scale = 1.0 / (alpha - beta);
            for v in colk[k + 1..].iter_mut() {
                *v *= scale;
            }
            colk[k] = beta;
            (beta - alpha) / beta
        };
        tau[k] = t;

        if t != 0.0 {
            let (head, tail) = data.split_at_mut((k + 1) * m);
            let v = &head[k * m..(k + 1) * m];
            for j in 0..n - k - 1 {
                let col = &mut tail[j * m..(j + 1) * m];
                let mut s = col[k];
                for i in k + 1..m {
                    s += v[i] * col[i];
                }
                s *= t;
                col[k] -= s;
                for i in k + 1..m {
                    col[i] -= s * v[i];
                }
            }
        }

        if pivot {
            for j in k + 1..n {
                if norms[j] != 0.0 {
                    let r = a[(k, j)].abs() / norms[j];
                    let temp = (1.0 - r * r).max(0.0);
                    let ratio = norms[j] / norms_ref[j];
                    if temp * ratio * ratio <= f64::EPSILON.sqrt() {
                        let nn = a.view((k + 1, j), (m - k - 1, 1)).norm();
                        norms[j] = nn;
                        norms_ref[j] = nn;
                    } else {
                        norms[j] *= temp.sqrt();
                    }
                }
            }
        }
    }

    PivotedQr { qr: a, tau, perm }
}

fn apply_reflectors(qr: &DMatrix<f64>, tau: &[f64], b: &mut DMatrix<f64>, forward_q: bool) {
    let m = qr.nrows();
    assert_eq!(b.nrows(), m);
    let order: Vec<usize> = if forward_q {
        (0..tau.len()).rev().collect()
    } else {
        (0..tau.len()).collect()
    };
    let q = qr.as_slice();
    for k in order {
        let t = tau[k];
        if t == 0.0 {
            continue;
        }
        let v = &q[k * m..(k + 1) * m];
        for mut col in b.column_iter_mut() {
            let c = col.as_mut_slice();
            let mut s = c[k];
            for i in k + 1..m {
                s += v[i] * c[i];
            }
            s *= t;
            c[k] -= s;
            for i in k + 1..m {
                c[i] -= s * v[i];
            }
        }
    }
}

/// Minimum-norm least-squares solution of `A X ≈ B` through a complete
/// orthogonal decomposition. Columns of `R` with `|R_ii| ≤ rank_tol` are
/// treated as rank deficient. Returns the solution and the numerical rank.
pub fn min_norm_lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>, rank_tol: f64) -> (DMatrix<f64>, usize) {
    let (m, n) = a.shape();
    assert_eq!(b.nrows(), m);
    let qrcp = PivotedQr::new(a);
    let r = qrcp.rank(rank_tol);
    let mut c = b.clone();
    qrcp.apply_qt(&mut c);
    let ncols = b.ncols();
    if r == 0 {
        return (DMatrix::zeros(n, ncols), 0);
    }

    // T = [R11 R12] (r × n); factor Tᵀ = Q2 R2 so that T = R2ᵀ Q2ᵀ.
    let t_transpose = DMatrix::from_fn(n, r, |i, j| if i >= j { qrcp.qr[(j, i)] } else { 0.0 });
    let qr2 = householder_qr(t_transpose, false);

    // Forward solve R2ᵀ W = C1.
    let mut y = DMatrix::zeros(n, ncols);
    for col in 0..ncols {
        for i in 0..r {
            let mut s = c[(i, col)];
            for k in 0..i {
                s -= qr2.qr[(k, i)] * y[(k, col)];
            }
            y[(i, col)] = s / qr2.qr[(i, i)];
        }
    }
    qr2.apply_q(&mut y);

    let mut x = DMatrix::zeros(n, ncols);
    for (j, &pj) in qrcp.perm.iter().enumerate() {
        x.set_row(pj, &y.row(j));
    }
    (x, r)
}

/// Orthonormal basis of the null space of `c` (rows are constraints), with
/// rank decided by `|R_ii| > rel_tol · |R_00|`. Returns the basis and rank.
pub fn null_space(c: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let (m, n) = c.shape();
    if m == 0 {
        return (DMatrix::identity(n, n), 0);
    }
    let qrcp = PivotedQr::new(&c.transpose());
    let r00 = qrcp.r_diag().first().map_or(0.0, |d| d.abs());
    let rank = if r00 == 0.0 { 0 } else { qrcp.rank(rel_tol * r00) };
    let mut basis = DMatrix::zeros(n, n - rank);
    for j in 0..n - rank {
        basis[(rank + j, j)] = 1.0;
    }
    qrcp.apply_q(&mut basis);
    (basis, rank)
}

/// Convenience wrapper for a single right-hand side.
pub fn min_norm_lstsq_vec(a: &DMatrix<f64>, b: &DVector<f64>, rank_tol: f64) -> (DVector<f64>, usize) {
    let (x, r) = min_norm_lstsq(a, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()), rank_tol);
    (x.column(0).into_owned(), r)
}
