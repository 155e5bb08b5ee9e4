//! Cluster block structure and the block-matrix operations built on it.
//!
//! Observations are grouped into contiguous runs of rows ("clusters"). All
//! kernel constructions in this crate are defined through a handful of
//! block-level primitives: extracting or zeroing the block diagonal of an
//! n x n matrix, stacking a vector into cluster columns, blockwise Kronecker
//! (Khatri-Rao) products, the block-vectorization pair `vecb`/`vecb_inv`,
//! and leave-clusters-out least-squares fits. The two non-trivial kernels —
//! the symmetric jackknife matrix and the many-controls kernel — live here
//! as well, since they are pure functions of the instrument/control columns
//! and the block structure.

use ndarray::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, chol_solve_mat, PivotedQr};

/// A partition of `0..n` into contiguous, nonempty cluster index ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterBlocks {
    /// Start offsets, length G + 1, with `starts[0] = 0`, `starts[G] = n`.
    starts: Vec<usize>,
}

impl ClusterBlocks {
    /// Build from explicit cluster sizes. Every size must be positive.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::EmptyData);
        }
        let mut starts = Vec::with_capacity(sizes.len() + 1);
        starts.push(0);
        for (g, &s) in sizes.iter().enumerate() {
            if s == 0 {
                return Err(Error::InvalidConfig(format!("cluster {g} is empty")));
            }
            starts.push(starts[g] + s);
        }
        Ok(ClusterBlocks { starts })
    }

    /// Total number of observations.
    pub fn n(&self) -> usize {
        *self.starts.last().unwrap()
    }

    /// Number of clusters.
    pub fn g(&self) -> usize {
        self.starts.len() - 1
    }

    /// Number of observations in cluster `g`.
    pub fn size(&self, g: usize) -> usize {
        self.starts[g + 1] - self.starts[g]
    }

    /// Row range of cluster `g`.
    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.starts[g]..self.starts[g + 1]
    }

    /// Cluster sizes in order.
    pub fn sizes(&self) -> Vec<usize> {
        (0..self.g()).map(|g| self.size(g)).collect()
    }

    /// Iterate over `(cluster index, row range)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
        (0..self.g()).map(move |g| (g, self.range(g)))
    }

    /// Largest cluster size.
    pub fn max_size(&self) -> usize {
        (0..self.g()).map(|g| self.size(g)).max().unwrap_or(0)
    }

    fn check_rows(&self, rows: usize, what: &str) -> Result<()> {
        if rows != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "{what} has {rows} rows but the block structure covers {}",
                self.n()
            )));
        }
        Ok(())
    }
}

/// Group identical consecutive labels into cluster blocks.
///
/// Labels must form contiguous runs: once a label's run has ended, it may
/// not reappear later in the sequence.
pub fn block_partition<T: PartialEq>(labels: &[T]) -> Result<ClusterBlocks> {
    if labels.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut run_starts: Vec<usize> = vec![0];
    for i in 1..labels.len() {
        if labels[i] != labels[i - 1] {
            // A fresh run: its label must not match any earlier run's label.
            for &s in &run_starts {
                if labels[i] == labels[s] {
                    return Err(Error::NonContiguousClusters { row: i });
                }
            }
            run_starts.push(i);
        }
    }
    let mut sizes = Vec::with_capacity(run_starts.len());
    for (j, &s) in run_starts.iter().enumerate() {
        let end = run_starts.get(j + 1).copied().unwrap_or(labels.len());
        sizes.push(end - s);
    }
    ClusterBlocks::from_sizes(&sizes)
}

/// The block-diagonal part of a square matrix: entries inside diagonal
/// cluster blocks are kept, everything else is zero.
pub fn block_diagonal_part(a: &ArrayView2<f64>, blocks: &ClusterBlocks) -> Result<Array2<f64>> {
    blocks.check_rows(a.nrows(), "matrix")?;
    blocks.check_rows(a.ncols(), "matrix")?;
    let mut out = Array2::<f64>::zeros(a.dim());
    for (_, r) in blocks.iter() {
        out.slice_mut(s![r.clone(), r.clone()])
            .assign(&a.slice(s![r.clone(), r]));
    }
    Ok(out)
}

/// Zero the diagonal cluster blocks of a square matrix, leaving the
/// off-block-diagonal entries untouched.
pub fn zero_block_diagonal(a: &ArrayView2<f64>, blocks: &ClusterBlocks) -> Result<Array2<f64>> {
    blocks.check_rows(a.nrows(), "matrix")?;
    blocks.check_rows(a.ncols(), "matrix")?;
    let mut out = a.to_owned();
    for (_, r) in blocks.iter() {
        out.slice_mut(s![r.clone(), r]).fill(0.0);
    }
    Ok(out)
}

/// Spread a vector into an `n x G` matrix whose column `g` carries the
/// vector's cluster-`g` entries and is zero elsewhere.
pub fn column_blockify(v: &ArrayView1<f64>, blocks: &ClusterBlocks) -> Result<Array2<f64>> {
    blocks.check_rows(v.len(), "vector")?;
    let mut out = Array2::<f64>::zeros((blocks.n(), blocks.g()));
    for (g, r) in blocks.iter() {
        out.slice_mut(s![r.clone(), g]).assign(&v.slice(s![r]));
    }
    Ok(out)
}

/// Orthogonal projection onto the column space of `z` and its complement:
/// `(P, M)` with `P = Z (Z'Z)^{-1} Z'` and `M = I - P`.
///
/// Errors with [`Error::RankDeficient`] when `z` lacks full column rank.
pub fn projection_pair(z: &ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let qr = PivotedQr::factor(z);
    if !qr.is_full_column_rank() {
        return Err(Error::RankDeficient {
            observed: qr.rank(),
            expected: z.ncols(),
        });
    }
    let q = qr.thin_q();
    let p = q.dot(&q.t());
    let mut m = -&p;
    for i in 0..m.nrows() {
        m[(i, i)] += 1.0;
    }
    Ok((p, m))
}

/// Blockwise Kronecker (Khatri-Rao) product. Both inputs are partitioned by
/// `row_blocks` x `col_blocks`; output block `(i, j)` is
/// `A_[i,j] (kron) B_[i,j]`.
///
/// Vectorization is row-major, matching [`vecb`]: for row block size `r`
/// and column block size `c`, output block `(i, j)` has shape
/// `(r_a r_b) x (c_a c_b)` with entry `((ia, ib), (ja, jb))` equal to
/// `A[ia, ja] * B[ib, jb]`.
pub fn khatri_rao(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    row_blocks: &ClusterBlocks,
    col_blocks: &ClusterBlocks,
) -> Result<Array2<f64>> {
    row_blocks.check_rows(a.nrows(), "left matrix")?;
    col_blocks.check_rows(a.ncols(), "left matrix")?;
    row_blocks.check_rows(b.nrows(), "right matrix")?;
    col_blocks.check_rows(b.ncols(), "right matrix")?;

    let out_rows: usize = (0..row_blocks.g())
        .map(|i| row_blocks.size(i) * row_blocks.size(i))
        .sum();
    let out_cols: usize = (0..col_blocks.g())
        .map(|j| col_blocks.size(j) * col_blocks.size(j))
        .sum();
    let mut out = Array2::<f64>::zeros((out_rows, out_cols));

    let mut row_off = 0;
    for (_, ri) in row_blocks.iter() {
        let ra = ri.len();
        let mut col_off = 0;
        for (_, cj) in col_blocks.iter() {
            let ca = cj.len();
            let ablk = a.slice(s![ri.clone(), cj.clone()]);
            let bblk = b.slice(s![ri.clone(), cj.clone()]);
            for ia in 0..ra {
                for ib in 0..ra {
                    for ja in 0..ca {
                        for jb in 0..ca {
                            out[(row_off + ia * ra + ib, col_off + ja * ca + jb)] =
                                ablk[(ia, ja)] * bblk[(ib, jb)];
                        }
                    }
                }
            }
            col_off += ca * ca;
        }
        row_off += ra * ra;
    }
    Ok(out)
}

/// Stack the diagonal blocks of a square matrix into one vector, each block
/// flattened in row-major order. Length is the sum of squared block sizes.
pub fn vecb(a: &ArrayView2<f64>, blocks: &ClusterBlocks) -> Result<Array1<f64>> {
    blocks.check_rows(a.nrows(), "matrix")?;
    blocks.check_rows(a.ncols(), "matrix")?;
    let len: usize = (0..blocks.g())
        .map(|g| blocks.size(g) * blocks.size(g))
        .sum();
    let mut out = Array1::<f64>::zeros(len);
    let mut off = 0;
    for (_, r) in blocks.iter() {
        let m = r.len();
        let blk = a.slice(s![r.clone(), r]);
        for i in 0..m {
            for j in 0..m {
                out[off + i * m + j] = blk[(i, j)];
            }
        }
        off += m * m;
    }
    Ok(out)
}

/// Inverse of [`vecb`]: rebuild the block-diagonal `n x n` matrix whose
/// diagonal blocks are read row-major from `v`.
pub fn vecb_inv(v: &ArrayView1<f64>, blocks: &ClusterBlocks) -> Result<Array2<f64>> {
    let len: usize = (0..blocks.g())
        .map(|g| blocks.size(g) * blocks.size(g))
        .sum();
    if v.len() != len {
        return Err(Error::DimensionMismatch(format!(
            "vecb vector has length {} but the block structure needs {len}",
            v.len()
        )));
    }
    let n = blocks.n();
    let mut out = Array2::<f64>::zeros((n, n));
    let mut off = 0;
    for (_, r) in blocks.iter() {
        let m = r.len();
        let start = r.start;
        for i in 0..m {
            for j in 0..m {
                out[(start + i, start + j)] = v[off + i * m + j];
            }
        }
        off += m * m;
    }
    Ok(out)
}

/// The symmetric-jackknife building block: the matrix whose rows for
/// cluster `g` are `(I - P_[g,g])^{-1} P_[g,h]` for `h != g`, with the
/// diagonal cluster blocks exactly zero. Row block `g` applied to a vector
/// yields the leave-cluster-`g`-out fitted values for those rows.
///
/// Errors with [`Error::SingularClusterBlock`] when some `I - P_[g,g]` is
/// not positive definite (the cluster has leverage one).
pub fn symmetric_jackknife_matrix(
    z: &ArrayView2<f64>,
    blocks: &ClusterBlocks,
) -> Result<Array2<f64>> {
    blocks.check_rows(z.nrows(), "instrument matrix")?;
    let qr = PivotedQr::factor(z);
    if !qr.is_full_column_rank() {
        return Err(Error::RankDeficient {
            observed: qr.rank(),
            expected: z.ncols(),
        });
    }
    let q = qr.thin_q();
    let n = blocks.n();
    let mut out = Array2::<f64>::zeros((n, n));
    for (g, r) in blocks.iter() {
        let qg = q.slice(s![r.clone(), ..]);
        // I - P_[g,g] = I - Q_g Q_g'.
        let mut mgg = -qg.dot(&qg.t());
        for i in 0..r.len() {
            mgg[(i, i)] += 1.0;
        }
        let l = cholesky(&mgg.view()).ok_or(Error::SingularClusterBlock(g))?;
        // Rows of cluster g: (I - P_gg)^{-1} Q_g Q' = Y_g Q'.
        let yg = chol_solve_mat(&l.view(), &qg.view());
        out.slice_mut(s![r.clone(), ..]).assign(&yg.dot(&q.t()));
        // The diagonal block is exactly zero in theory; enforce it.
        out.slice_mut(s![r.clone(), r]).fill(0.0);
    }
    Ok(out)
}

/// Result of the many-controls kernel construction.
pub struct ManyControlsKernel {
    /// The kernel matrix, with diagonal cluster blocks exactly zero.
    pub kernel: Array2<f64>,
    /// Largest absolute entry found on the diagonal blocks before the final
    /// exact zeroing — a numerical diagnostic for the Khatri-Rao solve.
    pub pre_zero_residual: f64,
}

/// Kernel for designs with many controls: starting from the projection onto
/// the controls-partialled instruments, a block-diagonal correction `H` is
/// solved for so that `K = P - M_W H M_W` has exactly zero diagonal cluster
/// blocks, where `M_W` annihilates the controls.
///
/// With no controls (`w` has zero columns) this reduces to zeroing the
/// diagonal blocks of the instrument projection. The Gram system uses a
/// rank-revealing least-squares solve, so singular-but-consistent systems
/// (e.g. controls spanning cluster indicators) are handled; an inconsistent
/// system errors with [`Error::SingularKhatriRaoSystem`].
///
/// The Gram matrix has one row and column per diagonal-block entry, so
/// memory grows as the square of the sum of squared cluster sizes; this
/// construction targets moderate sample sizes.
pub fn many_controls_kernel(
    zbar: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    blocks: &ClusterBlocks,
) -> Result<ManyControlsKernel> {
    blocks.check_rows(zbar.nrows(), "instrument matrix")?;
    if w.ncols() > 0 {
        blocks.check_rows(w.nrows(), "control matrix")?;
    }
    let n = blocks.n();

    // M_W = I - P_W (identity when there are no controls).
    let mw = if w.ncols() == 0 {
        Array2::<f64>::eye(n)
    } else {
        let (_, m) = projection_pair(w)?;
        m
    };

    // Projection onto the partialled instruments M_W Zbar.
    let zt = mw.dot(zbar);
    let qr = PivotedQr::factor(&zt.view());
    if !qr.is_full_column_rank() {
        return Err(Error::RankDeficient {
            observed: qr.rank(),
            expected: zbar.ncols(),
        });
    }
    let q = qr.thin_q();
    let p = q.dot(&q.t());

    // Solve (M_W * M_W) vecb(H) = vecb(P) blockwise, where * is the
    // Khatri-Rao product over the cluster partition.
    let gram = khatri_rao(&mw.view(), &mw.view(), blocks, blocks)?;
    let rhs = vecb(&p.view(), blocks)?;
    let gqr = PivotedQr::factor(&gram.view());
    let h_vec = gqr.solve(&rhs.view());
    let resid = &gram.dot(&h_vec) - &rhs;
    let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let resid_norm = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
    if resid_norm > 1e-8 * rhs_norm.max(1.0) {
        return Err(Error::SingularKhatriRaoSystem);
    }

    let h = vecb_inv(&h_vec.view(), blocks)?;
    let mut kernel = &p - &mw.dot(&h).dot(&mw);

    // The solve drives the diagonal blocks to zero up to numerical error;
    // record the worst leftover and then zero them exactly.
    let mut pre_zero_residual = 0.0f64;
    for (_, r) in blocks.iter() {
        for i in r.clone() {
            for j in r.clone() {
                pre_zero_residual = pre_zero_residual.max(kernel[(i, j)].abs());
            }
        }
        kernel.slice_mut(s![r.clone(), r]).fill(0.0);
    }
    Ok(ManyControlsKernel {
        kernel,
        pre_zero_residual,
    })
}

/// Least-squares fitted values `Z c` where the coefficient `c` is estimated
/// with the listed clusters left out of the normal equations.
///
/// Errors with [`Error::RankDeficientAfterDrop`] when the remaining rows no
/// longer identify the coefficient.
pub fn leave_clusters_out_fit(
    z: &ArrayView2<f64>,
    v: &ArrayView1<f64>,
    blocks: &ClusterBlocks,
    drop: &[usize],
) -> Result<Array1<f64>> {
    blocks.check_rows(z.nrows(), "instrument matrix")?;
    blocks.check_rows(v.len(), "vector")?;
    let mut gram = z.t().dot(z);
    let mut rhs = z.t().dot(v);
    for &g in drop {
        let r = blocks.range(g);
        let zg = z.slice(s![r.clone(), ..]);
        let vg = v.slice(s![r]);
        gram = gram - zg.t().dot(&zg);
        rhs = rhs - zg.t().dot(&vg);
    }
    let l = cholesky(&gram.view())
        .ok_or_else(|| Error::RankDeficientAfterDrop(drop.to_vec()))?;
    let coef = crate::linalg::chol_solve(&l.view(), &rhs.view());
    Ok(z.dot(&coef))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_blocks() -> ClusterBlocks {
        ClusterBlocks::from_sizes(&[2, 3, 1]).unwrap()
    }

    fn lcg_matrix(rows: usize, cols: usize, seed: &mut u32) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| {
            *seed = seed.wrapping_mul(25173).wrapping_add(13849) % 65536;
            f64::from(*seed) / 65536.0 * 2.0 - 1.0
        })
    }

    #[test]
    fn partition_accepts_contiguous_labels() {
        let labels = ["a", "a", "b", "b", "b", "c"];
        let blocks = block_partition(&labels).unwrap();
        assert_eq!(blocks.g(), 3);
        assert_eq!(blocks.sizes(), vec![2, 3, 1]);
        assert_eq!(blocks.range(1), 2..5);
        assert_eq!(blocks.n(), 6);
    }

    #[test]
    fn partition_rejects_reappearing_label() {
        let labels = [1, 1, 2, 1];
        match block_partition(&labels) {
            Err(Error::NonContiguousClusters { row }) => assert_eq!(row, 3),
            other => panic!("expected NonContiguousClusters, got {other:?}"),
        }
    }

    #[test]
    fn diagonal_split_reassembles() {
        let mut seed = 9u32;
        let a = lcg_matrix(6, 6, &mut seed);
        let blocks = toy_blocks();
        let bd = block_diagonal_part(&a.view(), &blocks).unwrap();
        let off = zero_block_diagonal(&a.view(), &blocks).unwrap();
        let back = &bd + &off;
        for (x, y) in back.iter().zip(a.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 0.0);
        }
        // Off part has exactly zero diagonal blocks.
        for (_, r) in blocks.iter() {
            for i in r.clone() {
                for j in r.clone() {
                    assert_eq!(off[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn column_blockify_row_sums_recover_vector() {
        let v = array![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let blocks = toy_blocks();
        let b = column_blockify(&v.view(), &blocks).unwrap();
        assert_eq!(b.dim(), (6, 3));
        let rowsum = b.sum_axis(Axis(1));
        for (x, y) in rowsum.iter().zip(v.iter()) {
            assert_eq!(*x, *y);
        }
        // Column g is supported on cluster g only.
        assert_eq!(b[(0, 1)], 0.0);
        assert_eq!(b[(2, 0)], 0.0);
        assert_eq!(b[(5, 2)], 6.0);
    }

    #[test]
    fn projection_pair_is_idempotent_and_complementary() {
        let mut seed = 13u32;
        let z = lcg_matrix(10, 3, &mut seed);
        let (p, m) = projection_pair(&z.view()).unwrap();
        let pp = p.dot(&p);
        let pm = p.dot(&m);
        for i in 0..10 {
            for j in 0..10 {
                assert_abs_diff_eq!(pp[(i, j)], p[(i, j)], epsilon = 1e-12);
                assert_abs_diff_eq!(pm[(i, j)], 0.0, epsilon = 1e-12);
                let sum = p[(i, j)] + m[(i, j)];
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(sum, want, epsilon = 1e-12);
            }
        }
        // P Z = Z.
        let pz = p.dot(&z);
        for (x, y) in pz.iter().zip(z.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn khatri_rao_singleton_blocks_give_elementwise_square_structure() {
        // With all blocks of size one the Khatri-Rao product is the
        // elementwise (Hadamard) product.
        let mut seed = 21u32;
        let a = lcg_matrix(4, 4, &mut seed);
        let b = lcg_matrix(4, 4, &mut seed);
        let ones = ClusterBlocks::from_sizes(&[1, 1, 1, 1]).unwrap();
        let kr = khatri_rao(&a.view(), &b.view(), &ones, &ones).unwrap();
        assert_eq!(kr.dim(), (4, 4));
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(kr[(i, j)], a[(i, j)] * b[(i, j)], epsilon = 0.0);
            }
        }
    }

    #[test]
    fn khatri_rao_matches_manual_kronecker_block() {
        let mut seed = 33u32;
        let a = lcg_matrix(5, 5, &mut seed);
        let b = lcg_matrix(5, 5, &mut seed);
        let blocks = ClusterBlocks::from_sizes(&[2, 3]).unwrap();
        let kr = khatri_rao(&a.view(), &b.view(), &blocks, &blocks).unwrap();
        assert_eq!(kr.dim(), (4 + 9, 4 + 9));
        // Spot-check block (1, 0): rows 4.., cols ..4, from A[2..5, 0..2].
        for ia in 0..3 {
            for ib in 0..3 {
                for ja in 0..2 {
                    for jb in 0..2 {
                        let got = kr[(4 + ia * 3 + ib, ja * 2 + jb)];
                        let want = a[(2 + ia, ja)] * b[(2 + ib, jb)];
                        assert_abs_diff_eq!(got, want, epsilon = 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn vecb_round_trip() {
        let mut seed = 17u32;
        let a = lcg_matrix(6, 6, &mut seed);
        let blocks = toy_blocks();
        let v = vecb(&a.view(), &blocks).unwrap();
        assert_eq!(v.len(), 4 + 9 + 1);
        let back = vecb_inv(&v.view(), &blocks).unwrap();
        let bd = block_diagonal_part(&a.view(), &blocks).unwrap();
        for (x, y) in back.iter().zip(bd.iter()) {
            assert_eq!(*x, *y);
        }
    }

    #[test]
    fn kron_vec_convention_is_consistent() {
        // vecb/khatri_rao must agree on vectorization order:
        // kron(A, A) applied to vec(X) equals vec(A X A').
        let mut seed = 41u32;
        let a = lcg_matrix(3, 3, &mut seed);
        let x = lcg_matrix(3, 3, &mut seed);
        let one_block = ClusterBlocks::from_sizes(&[3]).unwrap();
        let kr = khatri_rao(&a.view(), &a.view(), &one_block, &one_block).unwrap();
        let vx = vecb(&x.view(), &one_block).unwrap();
        let got = kr.dot(&vx);
        let axat = a.dot(&x).dot(&a.t());
        let want = vecb(&axat.view(), &one_block).unwrap();
        for (g, w) in got.iter().zip(want.iter()) {
            assert_abs_diff_eq!(*g, *w, epsilon = 1e-13);
        }
    }

    #[test]
    fn symmetric_jackknife_has_zero_diagonal_blocks() {
        let mut seed = 29u32;
        let z = lcg_matrix(9, 2, &mut seed);
        let blocks = ClusterBlocks::from_sizes(&[3, 3, 3]).unwrap();
        let pt = symmetric_jackknife_matrix(&z.view(), &blocks).unwrap();
        for (_, r) in blocks.iter() {
            for i in r.clone() {
                for j in r.clone() {
                    assert_eq!(pt[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn symmetric_jackknife_rows_are_leave_one_out_fits() {
        let mut seed = 37u32;
        let z = lcg_matrix(12, 2, &mut seed);
        let v = lcg_matrix(12, 1, &mut seed).column(0).to_owned();
        let blocks = ClusterBlocks::from_sizes(&[4, 4, 4]).unwrap();
        let pt = symmetric_jackknife_matrix(&z.view(), &blocks).unwrap();
        let ptv = pt.dot(&v);
        for (g, r) in blocks.iter() {
            let fit = leave_clusters_out_fit(&z.view(), &v.view(), &blocks, &[g]).unwrap();
            for i in r {
                assert_abs_diff_eq!(ptv[i], fit[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn many_controls_without_controls_matches_plain() {
        let mut seed = 47u32;
        let z = lcg_matrix(9, 2, &mut seed);
        let w = Array2::<f64>::zeros((9, 0));
        let blocks = ClusterBlocks::from_sizes(&[3, 3, 3]).unwrap();
        let mc = many_controls_kernel(&z.view(), &w.view(), &blocks).unwrap();
        let (p, _) = projection_pair(&z.view()).unwrap();
        let plain = zero_block_diagonal(&p.view(), &blocks).unwrap();
        for (x, y) in mc.kernel.iter().zip(plain.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-10);
        }
    }

    #[test]
    fn leave_out_errors_when_rank_collapses() {
        // Instrument supported on one cluster only: dropping that cluster
        // kills identification.
        let mut z = Array2::<f64>::zeros((6, 1));
        z[(0, 0)] = 1.0;
        z[(1, 0)] = -2.0;
        let v = Array1::from_iter((0..6).map(|i| i as f64));
        let blocks = ClusterBlocks::from_sizes(&[2, 2, 2]).unwrap();
        match leave_clusters_out_fit(&z.view(), &v.view(), &blocks, &[0]) {
            Err(Error::RankDeficientAfterDrop(d)) => assert_eq!(d, vec![0]),
            other => panic!("expected RankDeficientAfterDrop, got {other:?}"),
        }
    }
}
