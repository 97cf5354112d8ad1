//! Dense symmetric indefinite factorization `P A Pᵀ = L D Lᵀ` with
//! Bunch–Kaufman partial pivoting.
//!
//! `D` is block diagonal with 1×1 and 2×2 blocks. Besides solves, the
//! factorization reports inertia (needed for Hessian regularization in the
//! SQP solver) and the smallest pivot magnitude (used as the singularity
//! test for KKT matrices).

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pivot {
    One,
    /// First column of a 2×2 block; the next column belongs to it.
    Two,
    /// Second column of a 2×2 block.
    TwoTail,
}

/// Counts of positive, negative and zero eigenvalues.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

#[derive(Clone, Debug)]
pub struct LdltFactor {
    n: usize,
    /// Strictly lower part holds `L`; diagonal and first subdiagonal of 2×2
    /// blocks hold `D`.
    factor: DMatrix<f64>,
    pivots: Vec<Pivot>,
    /// Row/column swapped with position `k` at step `k`.
    swaps: Vec<usize>,
    scale: f64,
}

const BK_ALPHA: f64 = 0.640_388_203_202_208_0; // (1 + sqrt(17)) / 8

impl LdltFactor {
    /// Factors the symmetric matrix `a`; only the lower triangle is read.
    pub fn factor(a: &DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "LDLT needs a square matrix");
        let n = a.nrows();
        let mut f = a.clone();
        let scale = (0..n)
            .flat_map(|j| (j..n).map(move |i| (i, j)))
            .fold(0.0_f64, |m, (i, j)| m.max(a[(i, j)].abs()));
        let mut pivots = vec![Pivot::One; n];
        let mut swaps: Vec<usize> = (0..n).collect();

        let data = f.as_mut_slice();
        let at = |i: usize, j: usize| j * n + i;

        let mut k = 0;
        while k < n {
            let absakk = data[at(k, k)].abs();
            let (mut imax, mut colmax) = (k, 0.0_f64);
            for i in k + 1..n {
                let v = data[at(i, k)].abs();
                if v > colmax {
                    colmax = v;
                    imax = i;
                }
            }

            if absakk.max(colmax) == 0.0 {
                // Zero column: record a zero 1×1 pivot, nothing to eliminate.
                pivots[k] = Pivot::One;
                swaps[k] = k;
                k += 1;
                continue;
            }

            let (kp, kstep) = if absakk >= BK_ALPHA * colmax {
                (k, 1)
            } else {
                let mut rowmax = 0.0_f64;
                for j in k..imax {
                    rowmax = rowmax.max(data[at(imax, j)].abs());
                }
                for i in imax + 1..n {
                    rowmax = rowmax.max(data[at(i, imax)].abs());
                }
                if absakk * rowmax >= BK_ALPHA * colmax * colmax {
                    (k, 1)
                } else if data[at(imax, imax)].abs() >= BK_ALPHA * rowmax {
                    (imax, 1)
                } else {
                    (imax, 2)
                }
            };

            let kk = k + kstep - 1;
            if kp != kk {
                symmetric_swap(data, n, kk, kp);
            }
            swaps[kk] = kp;
            if kstep == 2 {
                swaps[k] = k;
            }

            if kstep == 1 {
                pivots[k] = Pivot::One;
                let d = data[at(k, k)];
                if d != 0.0 {
                    let (head, tail) = data.split_at_mut((k + 1) * n);
                    let colk = &mut head[k * n..(k + 1) * n];
                    // Trailing update with the unscaled column, then scale it.
                    let inv = 1.0 / d;
                    for j in k + 1..n {
                        let t = colk[j] * inv;
                        if t == 0.0 {
                            continue;
                        }
                        let colj = &mut tail[(j - k - 1) * n..(j - k) * n];
                        for i in j..n {
                            colj[i] -= colk[i] * t;
                        }
                    }
                    for v in colk.iter_mut().skip(k + 1) {
                        *v *= inv;
                    }
                }
                k += 1;
            } else {
                pivots[k] = Pivot::Two;
                pivots[k + 1] = Pivot::TwoTail;
                let d11 = data[at(k, k)];
                let d21 = data[at(k + 1, k)];
                let d22 = data[at(k + 1, k + 1)];
                let det = d11 * d22 - d21 * d21;
                let (i11, i21, i22) = (d22 / det, -d21 / det, d11 / det);
                let (head, tail) = data.split_at_mut((k + 2) * n);
                let (c0, c1) = head[k * n..(k + 2) * n].split_at_mut(n);
                // L rows: [l0 l1] = [w0 w1] D⁻¹.
                let mut l0 = vec![0.0; n];
                let mut l1 = vec![0.0; n];
                for i in k + 2..n {
                    let (w0, w1) = (c0[i], c1[i]);
                    l0[i] = w0 * i11 + w1 * i21;
                    l1[i] = w0 * i21 + w1 * i22;
                }
                for j in k + 2..n {
                    let (w0, w1) = (c0[j], c1[j]);
                    if w0 == 0.0 && w1 == 0.0 {
                        continue;
                    }
                    let colj = &mut tail[(j - k - 2) * n..(j - k - 1) * n];
                    for i in j..n {
                        colj[i] -= l0[i] * w0 + l1[i] * w1;
                    }
                }
                c0[k + 2..n].copy_from_slice(&l0[k + 2..n]);
                c1[k + 2..n].copy_from_slice(&l1[k + 2..n]);
                k += 2;
            }
        }

        LdltFactor {
            n,
            factor: f,
            pivots,
            swaps,
            scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Largest absolute entry of the factored matrix.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Eigenvalues of each diagonal block of `D`.
    fn block_eigenvalues(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n);
        let mut k = 0;
        while k < self.n {
            match self.pivots[k] {
                Pivot::One => {
                    out.push(self.factor[(k, k)]);
                    k += 1;
                }
                _ => {
                    let a = self.factor[(k, k)];
                    let b = self.factor[(k + 1, k)];
                    let c = self.factor[(k + 1, k + 1)];
                    let mean = 0.5 * (a + c);
                    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                    out.push(mean + rad);
                    out.push(mean - rad);
                    k += 2;
                }
            }
        }
        out
    }

    /// Inertia of the factored matrix, counting pivots with magnitude at
    /// most `zero_tol` as zero.
    pub fn inertia(&self, zero_tol: f64) -> Inertia {
        let mut inertia = Inertia::default();
        for e in self.block_eigenvalues() {
            if e.abs() <= zero_tol {
                inertia.zero += 1;
            } else if e > 0.0 {
                inertia.positive += 1;
            } else {
                inertia.negative += 1;
            }
        }
        inertia
    }

    /// Smallest magnitude over the eigenvalues of the `D` blocks.
    pub fn min_pivot(&self) -> f64 {
        self.block_eigenvalues()
            .into_iter()
            .fold(f64::INFINITY, |m, e| m.min(e.abs()))
    }

    /// True when some pivot is at most `rel_tol` times the matrix scale.
    pub fn is_singular(&self, rel_tol: f64) -> bool {
        self.n > 0 && self.min_pivot() <= rel_tol * self.scale.max(f64::MIN_POSITIVE)
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        let f = self.factor.as_slice();
        let at = |i: usize, j: usize| j * n + i;

        for k in 0..n {
            let p = self.swaps[k];
            if p != k {
                b.swap(k, p);
            }
        }
        // Forward substitution with unit lower L.
        let mut k = 0;
        while k < n {
            match self.pivots[k] {
                Pivot::One => {
                    let bk = b[k];
                    if bk != 0.0 {
                        let col = &f[at(0, k)..at(0, k) + n];
                        for i in k + 1..n {
                            b[i] -= col[i] * bk;
                        }
                    }
                    k += 1;
                }
                _ => {
                    let (b0, b1) = (b[k], b[k + 1]);
                    let c0 = &f[at(0, k)..at(0, k) + n];
                    let c1 = &f[at(0, k + 1)..at(0, k + 1) + n];
                    for i in k + 2..n {
                        b[i] -= c0[i] * b0 + c1[i] * b1;
                    }
                    k += 2;
                }
            }
        }
        // Block diagonal solve.
        let mut k = 0;
        while k < n {
            match self.pivots[k] {
                Pivot::One => {
                    b[k] /= f[at(k, k)];
                    k += 1;
                }
                _ => {
                    let (a, c, d) = (f[at(k, k)], f[at(k + 1, k)], f[at(k + 1, k + 1)]);
                    let det = a * d - c * c;
                    let (b0, b1) = (b[k], b[k + 1]);
                    b[k] = (d * b0 - c * b1) / det;
                    b[k + 1] = (a * b1 - c * b0) / det;
                    k += 2;
                }
            }
        }
        // Backward substitution with Lᵀ.
        let mut k = n;
        while k > 0 {
            k -= 1;
            match self.pivots[k] {
                Pivot::One => {
                    let col = &f[at(0, k)..at(0, k) + n];
                    let s: f64 = (k + 1..n).map(|i| col[i] * b[i]).sum();
                    b[k] -= s;
                }
                Pivot::TwoTail => {
                    let j = k - 1;
                    let c0 = &f[at(0, j)..at(0, j) + n];
                    let c1 = &f[at(0, k)..at(0, k) + n];
                    let (mut s0, mut s1) = (0.0, 0.0);
                    for i in k + 1..n {
                        s0 += c0[i] * b[i];
                        s1 += c1[i] * b[i];
                    }
                    b[j] -= s0;
                    b[k] -= s1;
                    k = j;
                }
                Pivot::Two => unreachable!("2x2 head visited before its tail"),
            }
        }
        for k in (0..n).rev() {
            let p = self.swaps[k];
            if p != k {
                b.swap(k, p);
            }
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        x
    }
}

/// Swaps rows and columns `p < q` of a symmetric matrix stored in the lower
/// triangle, including the already computed `L` columns left of `p`.
fn symmetric_swap(data: &mut [f64], n: usize, p: usize, q: usize) {
    debug_assert!(p < q);
    let at = |i: usize, j: usize| j * n + i;
    for j in 0..p {
        data.swap(at(p, j), at(q, j));
    }
    data.swap(at(p, p), at(q, q));
    for i in p + 1..q {
        data.swap(at(i, p), at(q, i));
    }
    for i in q + 1..n {
        data.swap(at(i, p), at(i, q));
    }
}
