//! Small dense linear-algebra kernels used throughout the crate.
//!
//! Everything here operates on `ndarray` types and is written for the
//! moderate sizes this crate actually meets (matrices up to a few thousand
//! rows and at most a few hundred columns): Householder QR with column
//! pivoting for rank detection and least squares, Cholesky factorization for
//! symmetric positive-definite solves, and a cyclic Jacobi eigensolver for
//! small symmetric matrices.

use ndarray::prelude::*;

/// Rank-revealing QR factorization with column pivoting.
///
/// `A P = Q R` with orthonormal `Q` and upper-triangular `R` whose diagonal
/// magnitudes are non-increasing. The numerical rank is the number of
/// diagonal entries above `max(rows, cols) * eps * |r_00|`.
pub struct PivotedQr {
    fac: Array2<f64>,
    tau: Vec<f64>,
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    /// Factor a matrix. Works for any shape; rank detection assumes the
    /// interesting case `rows >= cols`.
    pub fn factor(a: &ArrayView2<f64>) -> Self {
        let (rows, cols) = a.dim();
        let steps = rows.min(cols);
        let mut fac = a.to_owned();
        let mut tau = vec![0.0; steps];
        let mut perm: Vec<usize> = (0..cols).collect();

        for j in 0..steps {
            // Pivot: bring the remaining column of largest norm to position j.
            // Norms are recomputed exactly each step; at our sizes the extra
            // pass costs the same order as the factorization itself.
            let mut best = j;
            let mut best_norm = -1.0;
            for l in j..cols {
                let norm: f64 = fac.slice(s![j.., l]).iter().map(|v| v * v).sum();
                if norm > best_norm {
                    best_norm = norm;
                    best = l;
                }
            }
            if best != j {
                perm.swap(j, best);
                for i in 0..rows {
                    fac.swap((i, j), (i, best));
                }
            }

            // Householder reflector zeroing column j below the diagonal.
            let x0 = fac[(j, j)];
            let sigma: f64 = fac.slice(s![j + 1.., j]).iter().map(|v| v * v).sum();
            if sigma == 0.0 {
                tau[j] = 0.0; // Column already reduced; reflector is identity.
                continue;
            }
            let mu = (x0 * x0 + sigma).sqrt();
            let beta = if x0 <= 0.0 { mu } else { -mu };
            let v0 = x0 - beta;
            tau[j] = (beta - x0) / beta;
            // Store the reflector tail (normalized so its head is one).
            for i in j + 1..rows {
                fac[(i, j)] /= v0;
            }
            fac[(j, j)] = beta;

            // Apply the reflector to the trailing columns.
            for l in j + 1..cols {
                let mut dot = fac[(j, l)];
                for i in j + 1..rows {
                    dot += fac[(i, j)] * fac[(i, l)];
                }
                let scale = tau[j] * dot;
                fac[(j, l)] -= scale;
                for i in j + 1..rows {
                    let vi = fac[(i, j)];
                    fac[(i, l)] -= scale * vi;
                }
            }
        }

        let r00 = fac[(0, 0)].abs();
        let tol = rows.max(cols) as f64 * f64::EPSILON * r00;
        let mut rank = 0;
        for j in 0..steps {
            if fac[(j, j)].abs() > tol {
                rank = j + 1;
            } else {
                break;
            }
        }
        PivotedQr { fac, tau, perm, rank }
    }

    /// Numerical rank detected during factorization.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Whether the input had full column rank.
    pub fn is_full_column_rank(&self) -> bool {
        self.rank == self.fac.ncols()
    }

    fn rows(&self) -> usize {
        self.fac.nrows()
    }

    /// Apply `Q'` to a vector in place (`b` must have `rows` entries).
    fn apply_qt(&self, b: &mut Array1<f64>) {
        let rows = self.rows();
        for j in 0..self.tau.len() {
            if self.tau[j] == 0.0 {
                continue;
            }
            let mut dot = b[j];
            for i in j + 1..rows {
                dot += self.fac[(i, j)] * b[i];
            }
            let scale = self.tau[j] * dot;
            b[j] -= scale;
            for i in j + 1..rows {
                b[i] -= scale * self.fac[(i, j)];
            }
        }
    }

    /// Orthonormal basis for the column space: the first `rank` columns of
    /// `Q`, as a `rows x rank` matrix.
    pub fn thin_q(&self) -> Array2<f64> {
        let rows = self.rows();
        let r = self.rank;
        let mut q = Array2::<f64>::zeros((rows, r));
        for c in 0..r {
            q[(c, c)] = 1.0;
        }
        // Accumulate Q e_c by applying reflectors in reverse order.
        // Reflectors beyond the rank act on rows where e_c is still zero,
        // so including them is a no-op and keeps the loop uniform.
        for j in (0..self.tau.len()).rev() {
            if self.tau[j] == 0.0 {
                continue;
            }
            for c in 0..r {
                let mut dot = q[(j, c)];
                for i in j + 1..rows {
                    dot += self.fac[(i, j)] * q[(i, c)];
                }
                let scale = self.tau[j] * dot;
                q[(j, c)] -= scale;
                for i in j + 1..rows {
                    q[(i, c)] -= scale * self.fac[(i, j)];
                }
            }
        }
        q
    }

    /// Basic least-squares solution of `A x ~ b`: free variables (beyond the
    /// numerical rank) are set to zero. Callers that require an exact
    /// solution should verify the residual themselves.
    pub fn solve(&self, b: &ArrayView1<f64>) -> Array1<f64> {
        let cols = self.fac.ncols();
        let r = self.rank;
        let mut y = b.to_owned();
        self.apply_qt(&mut y);
        // Back substitution on the leading r x r block of R.
        let mut xr = Array1::<f64>::zeros(r);
        for j in (0..r).rev() {
            let mut acc = y[j];
            for l in j + 1..r {
                acc -= self.fac[(j, l)] * xr[l];
            }
            xr[j] = acc / self.fac[(j, j)];
        }
        let mut x = Array1::<f64>::zeros(cols);
        for j in 0..r {
            x[self.perm[j]] = xr[j];
        }
        x
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix.
/// Returns the lower factor `L` with `A = L L'`, or `None` if a
/// non-positive pivot is met.
pub fn cholesky(a: &ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        // Negated comparison so a NaN pivot fails rather than passes.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / dj;
        }
    }
    Some(l)
}

/// Solve `L L' x = b` given the lower Cholesky factor.
pub fn chol_solve(l: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.to_owned();
    for i in 0..n {
        let mut acc = y[i];
        for k in 0..i {
            acc -= l[(i, k)] * y[k];
        }
        y[i] = acc / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut acc = y[i];
        for k in i + 1..n {
            acc -= l[(k, i)] * y[k];
        }
        y[i] = acc / l[(i, i)];
    }
    y
}

/// Solve `L L' X = B` column by column.
pub fn chol_solve_mat(l: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(b.dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        out.column_mut(j).assign(&chol_solve(l, &col));
    }
    out
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(values, vectors)` with eigenvalues ascending and
/// `A = V diag(values) V'`.
pub fn jacobi_eigh(a: &ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "jacobi_eigh requires a square matrix");
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let stop = 1e-15 * frob.max(f64::MIN_POSITIVE);

    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                off += 2.0 * m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= stop {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[(i, p)];
                    let miq = m[(i, q)];
                    m[(i, p)] = c * mip - s * miq;
                    m[(i, q)] = s * mip + c * miq;
                }
                for i in 0..n {
                    let mpi = m[(p, i)];
                    let mqi = m[(q, i)];
                    m[(p, i)] = c * mpi - s * mqi;
                    m[(q, i)] = s * mpi + c * mqi;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&i| m[(i, i)]));
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (c, &i) in order.iter().enumerate() {
        vecs.column_mut(c).assign(&v.column(i));
    }
    (vals, vecs)
}

/// Inverse square root of a symmetric positive-semidefinite matrix.
/// Eigenvalues below `floor_rel` times the largest are lifted to that floor;
/// returns `None` when the largest eigenvalue is not strictly positive.
pub fn sym_inverse_sqrt(a: &ArrayView2<f64>, floor_rel: f64) -> Option<Array2<f64>> {
    let (vals, vecs) = jacobi_eigh(a);
    let lmax = vals[vals.len() - 1];
    // Negated comparison so a NaN eigenvalue fails rather than passes.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(lmax > 0.0) {
        return None;
    }
    let floor = floor_rel * lmax;
    let n = vals.len();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let lam = vals[j].max(floor);
        let w = 1.0 / lam.sqrt();
        scaled.column_mut(j).mapv_inplace(|x| x * w);
    }
    Some(scaled.dot(&vecs.t()))
}

/// Squared Frobenius norm.
pub fn frob_sq(a: &ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lcg_matrix(rows: usize, cols: usize, seed: &mut u32) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| {
            *seed = seed.wrapping_mul(25173).wrapping_add(13849) % 65536;
            f64::from(*seed) / 65536.0 * 2.0 - 1.0
        })
    }

    #[test]
    fn qr_reconstructs_and_ranks() {
        let mut seed = 7u32;
        let a = lcg_matrix(20, 6, &mut seed);
        let qr = PivotedQr::factor(&a.view());
        assert_eq!(qr.rank(), 6);
        let q = qr.thin_q();
        // Orthonormal columns.
        let qtq = q.t().dot(&q);
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(qtq[(i, j)], want, epsilon = 1e-12);
            }
        }
        // Q Q' a = a (a lies in its own column space).
        let proj = q.dot(&q.t().dot(&a));
        for (x, y) in proj.iter().zip(a.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn qr_detects_rank_deficiency() {
        let mut seed = 3u32;
        let a = lcg_matrix(15, 3, &mut seed);
        // Append a column that is an exact linear combination.
        let extra = &a.column(0) + &a.column(2);
        let mut b = Array2::<f64>::zeros((15, 4));
        b.slice_mut(s![.., ..3]).assign(&a);
        b.column_mut(3).assign(&extra);
        let qr = PivotedQr::factor(&b.view());
        assert_eq!(qr.rank(), 3);
        assert!(!qr.is_full_column_rank());
    }

    #[test]
    fn qr_least_squares_matches_normal_equations() {
        let mut seed = 11u32;
        let a = lcg_matrix(25, 4, &mut seed);
        let b = lcg_matrix(25, 1, &mut seed).column(0).to_owned();
        let qr = PivotedQr::factor(&a.view());
        let x = qr.solve(&b.view());
        let gram = a.t().dot(&a);
        let rhs = a.t().dot(&b);
        let l = cholesky(&gram.view()).unwrap();
        let x_ne = chol_solve(&l.view(), &rhs.view());
        for j in 0..4 {
            assert_abs_diff_eq!(x[j], x_ne[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn qr_consistent_singular_system() {
        // Singular but consistent: b in the column space.
        let mut seed = 19u32;
        let a3 = lcg_matrix(10, 3, &mut seed);
        let mut a = Array2::<f64>::zeros((10, 4));
        a.slice_mut(s![.., ..3]).assign(&a3);
        let dep = &a3.column(1) - &a3.column(2);
        a.column_mut(3).assign(&dep);
        let coef = array![1.0, -2.0, 0.5, 1.5];
        let b = a.dot(&coef);
        let qr = PivotedQr::factor(&a.view());
        assert_eq!(qr.rank(), 3);
        let x = qr.solve(&b.view());
        let resid = &a.dot(&x) - &b;
        let rel = resid.iter().map(|v| v * v).sum::<f64>().sqrt()
            / b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rel < 1e-12, "residual {rel} too large");
    }

    #[test]
    fn cholesky_round_trip() {
        let mut seed = 5u32;
        let m = lcg_matrix(8, 5, &mut seed);
        let spd = m.t().dot(&m) + Array2::<f64>::eye(5) * 0.5;
        let l = cholesky(&spd.view()).unwrap();
        let back = l.dot(&l.t());
        for (x, y) in back.iter().zip(spd.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
        let b = Array1::from_iter((0..5).map(|i| i as f64 - 2.0));
        let x = chol_solve(&l.view(), &b.view());
        let r = &spd.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a.view()).is_none());
    }

    #[test]
    fn jacobi_eigh_diagonalizes() {
        let mut seed = 23u32;
        let m = lcg_matrix(9, 6, &mut seed);
        let sym = m.t().dot(&m);
        let (vals, vecs) = jacobi_eigh(&sym.view());
        // Ascending order and PSD.
        for j in 1..6 {
            assert!(vals[j] >= vals[j - 1]);
        }
        assert!(vals[0] > -1e-12);
        let recon = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
        for (x, y) in recon.iter().zip(sym.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-10);
        }
    }

    #[test]
    fn inverse_sqrt_inverts() {
        let mut seed = 31u32;
        let m = lcg_matrix(10, 4, &mut seed);
        let spd = m.t().dot(&m) + Array2::<f64>::eye(4) * 0.3;
        let is = sym_inverse_sqrt(&spd.view(), 1e-12).unwrap();
        let ident = is.dot(&spd).dot(&is);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(ident[(i, j)], want, epsilon = 1e-10);
            }
        }
    }
}
