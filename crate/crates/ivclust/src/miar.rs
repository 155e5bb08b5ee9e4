//! Many-instrument AR statistic built from per-cluster summed moments.
//!
//! Summing `z_i eps_i(b)` within each cluster gives a G x k moment matrix
//! `M` whose rows behave, under cluster-level sign symmetry, like sign-flipped
//! versions of themselves. The statistic is a quadratic form in the
//! projection `P = M (M'M)^{-1} M'` with its diagonal removed, so its null
//! distribution is driven entirely by between-cluster terms and remains
//! valid with instrument counts growing with (but below) the cluster count.

use ndarray::prelude::*;

use crate::design::ClusteredDesign;
use crate::error::{Error, Result};
use crate::jackknife::residuals;
use crate::linalg::cholesky;

/// Projection onto the column space of the cluster-summed moment matrix.
#[derive(Debug, Clone)]
pub struct ClusterMomentProjection {
    /// G x G symmetric idempotent matrix with trace k.
    pub p: Array2<f64>,
    /// Instrument count (the projection's rank).
    pub k: usize,
    /// Largest diagonal entry; values near one indicate a single cluster
    /// dominating an instrument direction.
    pub max_diag: f64,
}

/// Compute the cluster-moment projection `P = M (M'M)^{-1} M'` where row
/// `g` of `M` is the summed moment `m_g(b) = Z_[g]' eps_[g](b)`.
///
/// Requires `k < G`; the weight matrix `M'M` is factored by Cholesky, with
/// failure (for example, a rank drop caused by zero residuals in some
/// clusters) reported as [`Error::SingularWeight`].
pub fn cluster_moment_projection(
    design: &ClusteredDesign,
    beta: &ArrayView1<f64>,
) -> Result<ClusterMomentProjection> {
    let k = design.k();
    let gnum = design.g();
    if k >= gnum {
        return Err(Error::TooManyInstruments { k, g: gnum });
    }
    let m = cluster_moments(design, beta)?;
    projection_from_moments(&m)
}

/// Cluster-summed moment matrix `M` (G x k) at the hypothesized `b`.
pub(crate) fn cluster_moments(
    design: &ClusteredDesign,
    beta: &ArrayView1<f64>,
) -> Result<Array2<f64>> {
    let eps = residuals(design, beta)?;
    let z = design.z();
    let blocks = design.blocks();
    let mut m = Array2::<f64>::zeros((blocks.g(), design.k()));
    for (g, r) in blocks.iter() {
        let mg = z.slice(s![r.clone(), ..]).t().dot(&eps.slice(s![r]));
        m.row_mut(g).assign(&mg);
    }
    Ok(m)
}

pub(crate) fn projection_from_moments(m: &Array2<f64>) -> Result<ClusterMomentProjection> {
    let k = m.ncols();
    let w = m.t().dot(m);
    let l = cholesky(&w.view()).ok_or(Error::SingularWeight)?;
    // P = M W^{-1} M' via the triangular factor: U = L^{-1} M' gives
    // P = U'U, keeping P symmetric PSD by construction.
    let u = chol_half_solve(&l.view(), &m.t().to_owned().view());
    let p = u.t().dot(&u);
    let max_diag = p.diag().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(ClusterMomentProjection { p, k, max_diag })
}

/// Solve `L X = B` for lower-triangular `L` (forward substitution only).
fn chol_half_solve(l: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut acc = x[(i, col)];
            for j in 0..i {
                acc -= l[(i, j)] * x[(j, col)];
            }
            x[(i, col)] = acc / l[(i, i)];
        }
    }
    x
}

/// The many-instrument AR statistic and its variance estimator.
///
/// With `Pdot` the projection with zeroed diagonal, the statistic is
/// `iota' Pdot iota / sqrt(k * vhat)` and the variance estimator is
/// `vhat = (2/k) sum_{g != h} P_gh^2`. Errors with
/// [`Error::DegenerateVariance`] when all off-diagonal entries vanish.
pub fn clmi_statistic(design: &ClusteredDesign, beta: &ArrayView1<f64>) -> Result<(f64, f64)> {
    let proj = cluster_moment_projection(design, beta)?;
    clmi_from_projection(&proj.p, proj.k)
}

pub(crate) fn clmi_from_projection(p: &Array2<f64>, k: usize) -> Result<(f64, f64)> {
    let gnum = p.nrows();
    let mut numer = 0.0f64;
    let mut ssq = 0.0f64;
    for g in 0..gnum {
        for h in 0..gnum {
            if g == h {
                continue;
            }
            numer += p[(g, h)];
            ssq += p[(g, h)] * p[(g, h)];
        }
    }
    let kf = k as f64;
    let vhat = 2.0 * ssq / kf;
    if vhat <= 1e-14 {
        return Err(Error::DegenerateVariance);
    }
    Ok((numer / (kf * vhat).sqrt(), vhat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ClusterBlocks;
    use approx::assert_abs_diff_eq;

    fn lcg_matrix(rows: usize, cols: usize, seed: &mut u32) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| {
            *seed = seed.wrapping_mul(25173).wrapping_add(13849) % 65536;
            f64::from(*seed) / 65536.0 * 2.0 - 1.0
        })
    }

    fn toy_design(seed: u32, sizes: &[usize], k: usize) -> ClusteredDesign {
        let mut s = seed;
        let blocks = ClusterBlocks::from_sizes(sizes).unwrap();
        let n = blocks.n();
        let y = lcg_matrix(n, 1, &mut s).column(0).to_owned();
        let x = lcg_matrix(n, 1, &mut s);
        let z = lcg_matrix(n, k, &mut s);
        ClusteredDesign::new(y, x, z, None, blocks).unwrap()
    }

    #[test]
    fn projection_is_idempotent_with_trace_k() {
        let design = toy_design(5, &[2, 3, 2, 3, 2, 2, 3, 3], 3);
        let beta = array![0.4];
        let proj = cluster_moment_projection(&design, &beta.view()).unwrap();
        let pp = proj.p.dot(&proj.p);
        for (a, b) in pp.iter().zip(proj.p.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
        }
        let trace: f64 = proj.p.diag().sum();
        assert_abs_diff_eq!(trace, proj.k as f64, epsilon = 1e-8);
        for d in proj.p.diag() {
            assert!(*d >= -1e-12 && *d <= 1.0 + 1e-12);
        }
        assert!(proj.max_diag <= 1.0 + 1e-12);
    }

    #[test]
    fn k_equals_one_projection_is_rank_one() {
        let design = toy_design(9, &[2, 2, 3, 3], 1);
        let beta = array![0.0];
        let proj = cluster_moment_projection(&design, &beta.view()).unwrap();
        let m = cluster_moments(&design, &beta.view()).unwrap();
        let mv = m.column(0);
        let denom = mv.dot(&mv);
        for g in 0..design.g() {
            for h in 0..design.g() {
                assert_abs_diff_eq!(proj.p[(g, h)], mv[g] * mv[h] / denom, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn too_many_instruments_rejected() {
        let design = toy_design(13, &[3, 3, 3], 3);
        let beta = array![0.0];
        match cluster_moment_projection(&design, &beta.view()) {
            Err(Error::TooManyInstruments { k: 3, g: 3 }) => {}
            other => panic!("expected TooManyInstruments, got {other:?}"),
        }
    }

    #[test]
    fn two_cluster_statistic_is_a_sign() {
        // G=2, k=1: the off-diagonal entry is the only contribution and the
        // statistic collapses to sign(P_12).
        let design = toy_design(21, &[4, 3], 1);
        let beta = array![0.3];
        let proj = cluster_moment_projection(&design, &beta.view()).unwrap();
        let (stat, _) = clmi_statistic(&design, &beta.view()).unwrap();
        assert_abs_diff_eq!(stat, proj.p[(0, 1)].signum(), epsilon = 1e-12);
    }

    #[test]
    fn variance_invariant_under_sign_flips_exactly() {
        let design = toy_design(33, &[2, 3, 2, 3, 2], 2);
        let beta = array![0.1];
        let m = cluster_moments(&design, &beta.view()).unwrap();
        let base = projection_from_moments(&m).unwrap();
        let (_, v_base) = clmi_from_projection(&base.p, base.k).unwrap();
        // Flipping cluster residual signs conjugates P by a sign matrix:
        // diagonal unchanged, off-diagonal signs flip, squares identical.
        for pattern in 0..(1u32 << design.g()) {
            let mut flipped = m.clone();
            for g in 0..design.g() {
                if pattern >> g & 1 == 1 {
                    for v in flipped.row_mut(g) {
                        *v = -*v;
                    }
                }
            }
            let proj = projection_from_moments(&flipped).unwrap();
            let (_, v) = clmi_from_projection(&proj.p, proj.k).unwrap();
            assert_eq!(v, v_base);
            for g in 0..design.g() {
                assert_eq!(proj.p[(g, g)], base.p[(g, g)]);
            }
        }
    }

    #[test]
    fn zero_residuals_make_weight_singular() {
        // eps(b) identically zero zeroes every moment row.
        let mut s = 39u32;
        let blocks = ClusterBlocks::from_sizes(&[3, 3, 3]).unwrap();
        let n = blocks.n();
        let x = lcg_matrix(n, 1, &mut s);
        let z = lcg_matrix(n, 2, &mut s);
        let y = x.column(0).to_owned();
        let design = ClusteredDesign::new(y, x, z, None, blocks).unwrap();
        let beta = array![1.0];
        match cluster_moment_projection(&design, &beta.view()) {
            Err(Error::SingularWeight) => {}
            other => panic!("expected SingularWeight, got {other:?}"),
        }
    }
}
