//! Cluster jackknife AR and score statistics, their plain and cross-fit
//! variance/covariance estimators, the analytic variance oracle, and the
//! conditional-linear-combination estimator bundle.
//!
//! All statistics share one structure: a symmetric n x n weighting kernel
//! `K` with exactly zero diagonal cluster blocks, contracted against the
//! residual vector `e(b) = y - Xb` and the regressors. Because the kernel's
//! block diagonal vanishes, every quantity is a sum over pairs of distinct
//! clusters, and everything needed at a hypothesized `b` can be read off
//! the per-pair moment matrices `T_gh = D_g' K_[g,h] D_h` with `D = [y X]`.
//! For the plain and symmetric kernels the `T_gh` are assembled in factored
//! form (through the thin QR factor of `Z`) without materializing `K`.

use ndarray::prelude::*;

use crate::blocks::{
    many_controls_kernel, projection_pair, symmetric_jackknife_matrix, zero_block_diagonal,
    ClusterBlocks,
};
use crate::design::ClusteredDesign;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, chol_solve, chol_solve_mat, jacobi_eigh, sym_inverse_sqrt, PivotedQr};

/// Which weighting kernel to use for jackknife statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelChoice {
    /// Zero the diagonal cluster blocks of the instrument projection.
    PlainClusterJackknife,
    /// Symmetrized leave-cluster-out kernel; retains more signal under
    /// strong identification.
    SymmetricClusterJackknife,
    /// Kernel that re-centers the statistic in the presence of many
    /// exogenous controls; requires the design's controls unconsumed.
    ManyControls,
}

/// Which variance/covariance estimator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceEstimator {
    /// Estimators evaluated at the hypothesized residuals.
    Plain,
    /// Cross-fit estimators replacing designated residual factors by
    /// residuals minus leave-clusters-out fitted values; unbiased for the
    /// power-determining variance away from the null.
    CrossFit,
}

/// Variance and covariance estimates for the AR and score statistics.
#[derive(Debug, Clone)]
pub struct VarianceBundle {
    /// Estimated variance of the AR statistic, clamped to be nonnegative.
    pub v_ar: f64,
    /// The raw, unclamped estimate; can be negative in finite samples under
    /// the cross-fit estimator.
    pub v_ar_raw: f64,
    /// Estimated p x p variance of the score statistic (symmetrized).
    pub v_s: Array2<f64>,
    /// Estimated covariance between the AR and score statistics.
    pub c: Array1<f64>,
    /// Which estimator produced this bundle.
    pub estimator: VarianceEstimator,
    /// Set when `v_ar_raw` was negative and clamped to zero; tests treat
    /// such points as non-rejecting.
    pub clamped: bool,
}

/// Residuals at the hypothesized coefficient: `e(b) = y - X b`.
pub fn residuals(design: &ClusteredDesign, beta: &ArrayView1<f64>) -> Result<Array1<f64>> {
    if beta.len() != design.p() {
        return Err(Error::DimensionMismatch(format!(
            "beta has {} entries for {} endogenous regressors",
            beta.len(),
            design.p()
        )));
    }
    Ok(design.y() - &design.x().dot(beta))
}

/// Materialize the chosen kernel as a dense symmetric matrix with exactly
/// zero diagonal cluster blocks.
pub fn kernel_matrix(design: &ClusteredDesign, choice: KernelChoice) -> Result<Array2<f64>> {
    let blocks = design.blocks();
    match choice {
        KernelChoice::PlainClusterJackknife => {
            let (p, _) = projection_pair(&design.z().view())?;
            zero_block_diagonal(&p.view(), blocks)
        }
        KernelChoice::SymmetricClusterJackknife => {
            let pt = symmetric_jackknife_matrix(&design.z().view(), blocks)?;
            Ok((&pt + &pt.t()) * 0.5)
        }
        KernelChoice::ManyControls => {
            require_unconsumed_controls(design)?;
            let empty = Array2::<f64>::zeros((design.n(), 0));
            let w = design.w().map(|w| w.view()).unwrap_or_else(|| empty.view());
            Ok(many_controls_kernel(&design.z().view(), &w, blocks)?.kernel)
        }
    }
}

fn require_unconsumed_controls(design: &ClusteredDesign) -> Result<()> {
    if design.controls_partialled() {
        return Err(Error::InvalidConfig(
            "many-controls kernel needs the original controls, but they were already partialled out"
                .into(),
        ));
    }
    Ok(())
}

/// The residual coefficient vector `e(b) = (1, -b')'` so that
/// `D e(b) = y - X b` for `D = [y X]`.
pub(crate) fn e_vec(beta: &ArrayView1<f64>) -> Array1<f64> {
    let mut e = Array1::<f64>::zeros(beta.len() + 1);
    e[0] = 1.0;
    for (i, b) in beta.iter().enumerate() {
        e[i + 1] = -b;
    }
    e
}

fn build_d(design: &ClusteredDesign) -> Array2<f64> {
    let n = design.n();
    let p = design.p();
    let mut d = Array2::<f64>::zeros((n, p + 1));
    d.column_mut(0).assign(design.y());
    d.slice_mut(s![.., 1..]).assign(design.x());
    d
}

/// Per-pair moment matrices `T_gh = D_g' K_[g,h] D_h` for `g < h`; all
/// jackknife statistics at any hypothesized coefficient are contractions of
/// these `(p+1) x (p+1)` blocks. `T_hg = T_gh'` by kernel symmetry.
pub(crate) struct MomentTable {
    t: Vec<Array2<f64>>,
    gnum: usize,
    p: usize,
    k: usize,
    n: usize,
}

fn pair_index(g: usize, h: usize, gnum: usize) -> usize {
    debug_assert!(g < h && h < gnum);
    g * (2 * gnum - g - 1) / 2 + (h - g - 1)
}

impl MomentTable {
    pub(crate) fn from_design(design: &ClusteredDesign, choice: KernelChoice) -> Result<Self> {
        let blocks = design.blocks();
        let gnum = blocks.g();
        let p = design.p();
        let k = design.k();
        let n = design.n();
        let d = build_d(design);

        let t = match choice {
            KernelChoice::PlainClusterJackknife | KernelChoice::SymmetricClusterJackknife => {
                let qr = PivotedQr::factor(&design.z().view());
                if !qr.is_full_column_rank() {
                    return Err(Error::RankDeficient {
                        observed: qr.rank(),
                        expected: k,
                    });
                }
                let q = qr.thin_q();
                // F_g = Q_g' D_g lifts each cluster into instrument space.
                let f: Vec<Array2<f64>> = blocks
                    .iter()
                    .map(|(_, r)| q.slice(s![r.clone(), ..]).t().dot(&d.slice(s![r, ..])))
                    .collect();
                let ftil: Option<Vec<Array2<f64>>> =
                    if choice == KernelChoice::SymmetricClusterJackknife {
                        let mut out = Vec::with_capacity(gnum);
                        for (g, r) in blocks.iter() {
                            let qg = q.slice(s![r, ..]);
                            // I_k - Q_g'Q_g is PD exactly when the cluster's
                            // leverage stays below one.
                            let mut isg = -qg.t().dot(&qg);
                            for i in 0..k {
                                isg[(i, i)] += 1.0;
                            }
                            let l =
                                cholesky(&isg.view()).ok_or(Error::SingularClusterBlock(g))?;
                            out.push(chol_solve_mat(&l.view(), &f[g].view()));
                        }
                        Some(out)
                    } else {
                        None
                    };

                let mut t = Vec::with_capacity(gnum * (gnum - 1) / 2);
                for g in 0..gnum {
                    for h in g + 1..gnum {
                        let block = match &ftil {
                            None => f[g].t().dot(&f[h]),
                            Some(ft) => {
                                (ft[g].t().dot(&f[h]) + f[g].t().dot(&ft[h])) * 0.5
                            }
                        };
                        t.push(block);
                    }
                }
                t
            }
            KernelChoice::ManyControls => {
                let kern = kernel_matrix(design, choice)?;
                let mut t = Vec::with_capacity(gnum * (gnum - 1) / 2);
                for g in 0..gnum {
                    let rg = blocks.range(g);
                    for h in g + 1..gnum {
                        let rh = blocks.range(h);
                        let dg = d.slice(s![rg.clone(), ..]);
                        let dh = d.slice(s![rh.clone(), ..]);
                        let kgh = kern.slice(s![rg.clone(), rh]);
                        t.push(dg.t().dot(&kgh).dot(&dh));
                    }
                }
                t
            }
        };
        Ok(MomentTable { t, gnum, p, k, n })
    }

    fn pair(&self, g: usize, h: usize) -> &Array2<f64> {
        &self.t[pair_index(g, h, self.gnum)]
    }

    /// AR numerator `e(b)' K e(b) / sqrt(k)`.
    pub(crate) fn ar(&self, e: &ArrayView1<f64>) -> f64 {
        let mut acc = 0.0;
        for g in 0..self.gnum {
            for h in g + 1..self.gnum {
                acc += 2.0 * e.dot(&self.pair(g, h).dot(e));
            }
        }
        acc / (self.k as f64).sqrt()
    }

    /// Score vector `X' K e(b) / sqrt(n)`.
    pub(crate) fn score(&self, e: &ArrayView1<f64>) -> Array1<f64> {
        let mut acc = Array1::<f64>::zeros(self.p);
        for g in 0..self.gnum {
            for h in g + 1..self.gnum {
                let t = self.pair(g, h);
                let te = t.dot(e);
                let tte = t.t().dot(e);
                for i in 0..self.p {
                    acc[i] += te[i + 1] + tte[i + 1];
                }
            }
        }
        acc / (self.n as f64).sqrt()
    }

    /// Plain estimators: `(v_ar, v_s, c)` per the pairwise displays.
    pub(crate) fn plain_components(&self, e: &ArrayView1<f64>) -> (f64, Array2<f64>, Array1<f64>) {
        let p = self.p;
        let mut v_ar = 0.0f64;
        let mut v_s_cross = Array2::<f64>::zeros((p, p));
        let mut c = Array1::<f64>::zeros(p);
        let mut w = vec![Array1::<f64>::zeros(p); self.gnum];
        for g in 0..self.gnum {
            for h in g + 1..self.gnum {
                let t = self.pair(g, h);
                let te = t.dot(e); // lifts vs cluster h residual
                let tte = t.t().dot(e); // lifts vs cluster g residual
                let a = e.dot(&te);
                let b_gh = te.slice(s![1..]); // X_g' K_gh eps_h
                let b_hg = tte.slice(s![1..]); // X_h' K_hg eps_g
                v_ar += 2.0 * a * a;
                for i in 0..p {
                    c[i] += (b_gh[i] + b_hg[i]) * a;
                    w[h][i] += b_gh[i];
                    w[g][i] += b_hg[i];
                    for j in 0..p {
                        v_s_cross[(i, j)] += b_gh[i] * b_hg[j] + b_hg[i] * b_gh[j];
                    }
                }
            }
        }
        let mut v_s = v_s_cross;
        for wh in &w {
            for i in 0..p {
                for j in 0..p {
                    v_s[(i, j)] += wh[i] * wh[j];
                }
            }
        }
        let n = self.n as f64;
        let k = self.k as f64;
        v_ar *= 2.0 / k;
        v_s /= n;
        c *= 2.0 / (n * k).sqrt();
        (v_ar, v_s, c)
    }

    /// The five conditional-linear-combination estimators (p = 1 only).
    pub(crate) fn clc_components(&self, e: &ArrayView1<f64>) -> ClcEstimators {
        debug_assert_eq!(self.p, 1);
        let k = self.k as f64;
        let mut phi1 = 0.0f64;
        let mut phi12 = 0.0f64;
        let mut phi13 = 0.0f64;
        let mut upsilon = 0.0f64;
        let mut psi_pair = 0.0f64;
        // Per-cluster sums for the factorized triple term.
        let mut bsum = vec![0.0f64; self.gnum]; // sum_{g != h} b_gh, indexed by h
        let mut xsum = vec![0.0f64; self.gnum]; // sum_{i != h} xx_hi, indexed by h
        for g in 0..self.gnum {
            for h in g + 1..self.gnum {
                let t = self.pair(g, h);
                let te = t.dot(e);
                let tte = t.t().dot(e);
                let a = e.dot(&te);
                let b_gh = te[1];
                let b_hg = tte[1];
                let xx = t[(1, 1)]; // X_g' K_gh X_h, symmetric in (g,h)
                phi1 += 2.0 * a * a;
                phi12 += (b_gh + b_hg) * a;
                phi13 += 2.0 * a * xx;
                upsilon += 2.0 * xx * xx;
                psi_pair += (b_gh + b_hg) * xx;
                bsum[h] += b_gh;
                bsum[g] += b_hg;
                xsum[g] += xx;
                xsum[h] += xx;
            }
        }
        let psi_triple: f64 = (0..self.gnum).map(|h| bsum[h] * xsum[h]).sum();
        ClcEstimators {
            phi1: 2.0 * phi1 / k,
            phi12: 2.0 * phi12 / k,
            phi13: 2.0 * phi13 / k,
            psi: (psi_triple + psi_pair) / k,
            upsilon: 2.0 * upsilon / k,
        }
    }
}

/// Unstudentized cluster jackknife AR statistic `e(b)' K e(b) / sqrt(k)`.
pub fn ar_statistic(
    design: &ClusteredDesign,
    beta: &ArrayView1<f64>,
    choice: KernelChoice,
) -> Result<f64> {
    let e = checked_e(design, beta)?;
    let table = MomentTable::from_design(design, choice)?;
    Ok(table.ar(&e.view()))
}

/// Cluster jackknife score vector `X' K e(b) / sqrt(n)`.
pub fn score_statistic(
    design: &ClusteredDesign,
    beta: &ArrayView1<f64>,
    choice: KernelChoice,
) -> Result<Array1<f64>> {
    let e = checked_e(design, beta)?;
    let table = MomentTable::from_design(design, choice)?;
    Ok(table.score(&e.view()))
}

fn checked_e(design: &ClusteredDesign, beta: &ArrayView1<f64>) -> Result<Array1<f64>> {
    if beta.len() != design.p() {
        return Err(Error::DimensionMismatch(format!(
            "beta has {} entries for {} endogenous regressors",
            beta.len(),
            design.p()
        )));
    }
    Ok(e_vec(beta))
}

/// Variance/covariance estimators for the AR and score statistics at `b`.
///
/// The plain estimator's AR variance is a positively weighted sum of
/// squares; a negative value beyond numerical slack signals breakdown and
/// errors. The cross-fit AR variance can be legitimately negative in finite
/// samples; it is clamped to zero with `clamped` set (callers report such
/// points as non-rejecting), while `v_ar_raw` preserves the raw value.
pub fn variance_bundle(
    design: &ClusteredDesign,
    beta: &ArrayView1<f64>,
    choice: KernelChoice,
    estimator: VarianceEstimator,
) -> Result<VarianceBundle> {
    let e = checked_e(design, beta)?;
    let (v_ar_raw, v_s, c) = match estimator {
        VarianceEstimator::Plain => {
            let table = MomentTable::from_design(design, choice)?;
            table.plain_components(&e.view())
        }
        VarianceEstimator::CrossFit => cross_fit_components(design, &e.view(), choice)?,
    };
    bundle_from_raw(v_ar_raw, v_s, c, estimator)
}

/// Apply the per-estimator negativity policy and symmetrize the score
/// variance.
pub(crate) fn bundle_from_raw(
    v_ar_raw: f64,
    v_s: Array2<f64>,
    c: Array1<f64>,
    estimator: VarianceEstimator,
) -> Result<VarianceBundle> {
    let (v_ar, clamped) = match estimator {
        VarianceEstimator::Plain => {
            if v_ar_raw < -1e-12 {
                return Err(Error::NegativeVariance(v_ar_raw));
            }
            (v_ar_raw.max(0.0), false)
        }
        VarianceEstimator::CrossFit => {
            if v_ar_raw < 0.0 {
                (0.0, true)
            } else {
                (v_ar_raw, false)
            }
        }
    };
    // Exact symmetry for downstream eigendecompositions.
    let v_s = (&v_s + &v_s.t()) * 0.5;
    Ok(VarianceBundle {
        v_ar,
        v_ar_raw,
        v_s,
        c,
        estimator,
        clamped,
    })
}

/// Standardized joint AR/score vector `V^{-1/2} (AR, S')'`.
///
/// Errors with [`Error::SingularJointVariance`] when the assembled joint
/// variance matrix is numerically singular — in particular when the AR and
/// score statistics are perfectly correlated.
pub fn joint_standardized(
    design: &ClusteredDesign,
    beta: &ArrayView1<f64>,
    choice: KernelChoice,
    estimator: VarianceEstimator,
) -> Result<Array1<f64>> {
    let e = checked_e(design, beta)?;
    let table = MomentTable::from_design(design, choice)?;
    let ar = table.ar(&e.view());
    let score = table.score(&e.view());
    let bundle = variance_bundle(design, beta, choice, estimator)?;

    let p = design.p();
    let mut v = Array2::<f64>::zeros((p + 1, p + 1));
    v[(0, 0)] = bundle.v_ar;
    for i in 0..p {
        v[(0, i + 1)] = bundle.c[i];
        v[(i + 1, 0)] = bundle.c[i];
        for j in 0..p {
            v[(i + 1, j + 1)] = bundle.v_s[(i, j)];
        }
    }
    if p == 1 {
        let denom = bundle.v_ar * bundle.v_s[(0, 0)];
        if denom <= 0.0 {
            return Err(Error::SingularJointVariance);
        }
        let corr = bundle.c[0].abs() / denom.sqrt();
        if corr >= 1.0 - 1e-10 {
            return Err(Error::SingularJointVariance);
        }
    }
    let (vals, _) = jacobi_eigh(&v.view());
    let lmax = vals[vals.len() - 1];
    // Negated comparison so a NaN eigenvalue fails rather than passes.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(lmax > 0.0) || vals[0] <= 1e-12 * lmax {
        return Err(Error::SingularJointVariance);
    }
    let isqrt = sym_inverse_sqrt(&v.view(), 1e-12).ok_or(Error::SingularJointVariance)?;
    let mut stat = Array1::<f64>::zeros(p + 1);
    stat[0] = ar;
    for i in 0..p {
        stat[i + 1] = score[i];
    }
    Ok(isqrt.dot(&stat))
}

/// Inputs for the analytic (infeasible) variance formulas: the true
/// conditional moment blocks per cluster.
#[derive(Debug, Clone)]
pub struct AnalyticVarianceInputs {
    /// Conditional error covariance per cluster, `Sigma_g` of shape
    /// `n_g x n_g` (symmetric PSD).
    pub sigma: Vec<Array2<f64>>,
    /// Cross moments between first-stage errors and structural errors:
    /// `xi[g][i]` is `E(eta_(i),[g] eps_[g]' | Z)`, shape `n_g x n_g`.
    pub xi: Option<Vec<Vec<Array2<f64>>>>,
    /// First-stage error moments, flattened row-major over regressor
    /// pairs: `omega[g][i * p + j]` is `E(eta_(i),[g] eta_(j),[g]' | Z)`,
    /// shape `n_g x n_g`.
    pub omega: Option<Vec<Vec<Array2<f64>>>>,
    /// Instrument signal `Z Pi`, shape `n x p`; required for the score
    /// variance.
    pub z_pi: Option<Array2<f64>>,
}

/// Analytic variances computed from the truth.
#[derive(Debug, Clone)]
pub struct AnalyticVariances {
    pub v_ar: f64,
    /// Present when `xi`, `omega`, and `z_pi` were all supplied.
    pub v_s: Option<Array2<f64>>,
    /// Present when `xi` was supplied.
    pub c: Option<Array1<f64>>,
}

/// Ground-truth variance formulas used as Monte Carlo oracles: the AR
/// variance `(2/k) sum_{g != h} tr(Sigma_g K_[g,h] Sigma_h K_[h,g])`, the
/// AR/score covariance, and the score variance assembled from the supplied
/// conditional moments.
pub fn analytic_variances(
    inputs: &AnalyticVarianceInputs,
    kernel: &ArrayView2<f64>,
    blocks: &ClusterBlocks,
    k: usize,
) -> Result<AnalyticVariances> {
    let gnum = blocks.g();
    let n = blocks.n();
    if kernel.nrows() != n || kernel.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "kernel is {} x {}, blocks cover {n}",
            kernel.nrows(),
            kernel.ncols()
        )));
    }
    if inputs.sigma.len() != gnum {
        return Err(Error::DimensionMismatch(format!(
            "{} sigma blocks for {gnum} clusters",
            inputs.sigma.len()
        )));
    }
    for (g, r) in blocks.iter() {
        if inputs.sigma[g].dim() != (r.len(), r.len()) {
            return Err(Error::DimensionMismatch(format!(
                "sigma block {g} has shape {:?}, cluster has {} rows",
                inputs.sigma[g].dim(),
                r.len()
            )));
        }
    }
    let p = inputs
        .xi
        .as_ref()
        .and_then(|xi| xi.first().map(|v| v.len()))
        .unwrap_or(0);

    let kf = k as f64;
    let nf = n as f64;
    let tr_prod = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
        // tr(A B) with A (m x l), B (l x m).
        let mut acc = 0.0;
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                acc += a[(i, j)] * b[(j, i)];
            }
        }
        acc
    };

    let mut v_ar = 0.0f64;
    let mut c = if p > 0 {
        Some(Array1::<f64>::zeros(p))
    } else {
        None
    };
    let want_vs = inputs.xi.is_some() && inputs.omega.is_some() && inputs.z_pi.is_some();
    let mut v_s_pairs = if want_vs {
        Some(Array2::<f64>::zeros((p, p)))
    } else {
        None
    };

    for g in 0..gnum {
        let rg = blocks.range(g);
        for h in 0..gnum {
            if h == g {
                continue;
            }
            let rh = blocks.range(h);
            let kgh = kernel.slice(s![rg.clone(), rh.clone()]).to_owned();
            let khg = kernel.slice(s![rh.clone(), rg.clone()]).to_owned();
            // Sandwich pieces reused by every term of this ordered pair.
            let sig_h_khg = inputs.sigma[h].dot(&khg); // n_h x n_g
            let kgh_sig_h_khg = kgh.dot(&sig_h_khg); // n_g x n_g
            v_ar += tr_prod(&inputs.sigma[g], &kgh_sig_h_khg);

            if let (Some(c_acc), Some(xi)) = (c.as_mut(), inputs.xi.as_ref()) {
                for i in 0..p {
                    // tr(Xi_g^(i)' K_gh Sigma_h K_hg)
                    c_acc[i] += tr_prod(&xi[g][i].t().to_owned(), &kgh_sig_h_khg);
                }
            }
            if let (Some(vs), Some(xi), Some(omega)) =
                (v_s_pairs.as_mut(), inputs.xi.as_ref(), inputs.omega.as_ref())
            {
                for i in 0..p {
                    for j in 0..p {
                        // tr(K_gh Sigma_h K_hg Omega_g^(j,i))
                        vs[(i, j)] += tr_prod(&kgh_sig_h_khg, &omega[g][j * p + i]);
                        // tr(K_gh Xi_h^(j) K_hg Xi_g^(i))
                        vs[(i, j)] += tr_prod(&kgh.dot(&xi[h][j]).dot(&khg), &xi[g][i]);
                    }
                }
            }
        }
    }

    let v_s = if want_vs {
        let z_pi = inputs.z_pi.as_ref().unwrap();
        if z_pi.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "z_pi has {} rows, blocks cover {n}",
                z_pi.nrows()
            )));
        }
        let kz = kernel.dot(z_pi); // n x p
        let mut part1 = Array2::<f64>::zeros((p, p));
        for (g, r) in blocks.iter() {
            let kzg = kz.slice(s![r, ..]);
            part1 = part1 + kzg.t().dot(&inputs.sigma[g]).dot(&kzg);
        }
        let total = (&part1 + &v_s_pairs.unwrap()) / nf;
        Some((&total + &total.t()) * 0.5)
    } else {
        None
    };

    Ok(AnalyticVariances {
        v_ar: 2.0 * v_ar / kf,
        v_s,
        c: c.map(|c| c * 2.0 / (nf * kf).sqrt()),
    })
}

/// The five variance/covariance estimators for the conditional linear
/// combination construction (single endogenous regressor, plain kernel).
#[derive(Debug, Clone, Copy)]
pub struct ClcEstimators {
    /// Variance of the AR numerator (identical to the plain AR variance).
    pub phi1: f64,
    /// Covariance between the AR numerator and the score-type numerator.
    pub phi12: f64,
    /// Covariance between the AR numerator and the regressor quadratic.
    pub phi13: f64,
    /// Covariance between the score-type numerator and the regressor
    /// quadratic, including the three-cluster term.
    pub psi: f64,
    /// Variance of the regressor quadratic.
    pub upsilon: f64,
}

/// Compute the conditional-linear-combination estimator bundle at `b`.
pub fn clc_estimators(design: &ClusteredDesign, beta: &ArrayView1<f64>) -> Result<ClcEstimators> {
    if design.p() != 1 {
        return Err(Error::UnsupportedDimension(design.p()));
    }
    let e = checked_e(design, beta)?;
    let table = MomentTable::from_design(design, KernelChoice::PlainClusterJackknife)?;
    Ok(table.clc_components(&e.view()))
}

// ---------------------------------------------------------------------------
// Cross-fit estimators.
// ---------------------------------------------------------------------------

/// Per-cluster representation used to evaluate bilinear forms `u' K_[g,h] v`
/// without materializing the kernel where a factored form exists.
enum Rep {
    /// Vectors lifted into instrument space by `Q_g'`; for the symmetric
    /// kernel, `(I - Q_g'Q_g)^{-1}` factors are applied inside the cross
    /// products.
    Factored {
        f: Vec<Array2<f64>>,
        r: Vec<Array2<f64>>,
        tilde: Option<Vec<Array2<f64>>>,
    },
    /// Raw per-cluster vectors against a materialized kernel.
    Dense {
        kernel: Array2<f64>,
        d: Array2<f64>,
        z: Array2<f64>,
    },
}

struct CfEngine<'a> {
    blocks: &'a ClusterBlocks,
    zz: Array2<f64>,
    zd: Array2<f64>,
    czz: Vec<Array2<f64>>,
    czd: Vec<Array2<f64>>,
    rep: Rep,
}

impl<'a> CfEngine<'a> {
    fn new(design: &'a ClusteredDesign, choice: KernelChoice) -> Result<Self> {
        let blocks = design.blocks();
        let z = design.z();
        let d = build_d(design);
        let zz = z.t().dot(z);
        let zd = z.t().dot(&d);
        let czz: Vec<Array2<f64>> = blocks
            .iter()
            .map(|(_, r)| {
                let zg = z.slice(s![r, ..]);
                zg.t().dot(&zg)
            })
            .collect();
        let czd: Vec<Array2<f64>> = blocks
            .iter()
            .map(|(_, r)| {
                let zg = z.slice(s![r.clone(), ..]);
                zg.t().dot(&d.slice(s![r, ..]))
            })
            .collect();

        let rep = match choice {
            KernelChoice::PlainClusterJackknife | KernelChoice::SymmetricClusterJackknife => {
                let qr = PivotedQr::factor(&z.view());
                if !qr.is_full_column_rank() {
                    return Err(Error::RankDeficient {
                        observed: qr.rank(),
                        expected: design.k(),
                    });
                }
                let q = qr.thin_q();
                let f: Vec<Array2<f64>> = blocks
                    .iter()
                    .map(|(_, r)| q.slice(s![r.clone(), ..]).t().dot(&d.slice(s![r, ..])))
                    .collect();
                let r: Vec<Array2<f64>> = blocks
                    .iter()
                    .map(|(_, rr)| q.slice(s![rr.clone(), ..]).t().dot(&z.slice(s![rr, ..])))
                    .collect();
                let tilde = if choice == KernelChoice::SymmetricClusterJackknife {
                    let k = design.k();
                    let mut out = Vec::with_capacity(blocks.g());
                    for (g, rr) in blocks.iter() {
                        let qg = q.slice(s![rr, ..]);
                        let mut isg = -qg.t().dot(&qg);
                        for i in 0..k {
                            isg[(i, i)] += 1.0;
                        }
                        out.push(cholesky(&isg.view()).ok_or(Error::SingularClusterBlock(g))?);
                    }
                    Some(out)
                } else {
                    None
                };
                Rep::Factored { f, r, tilde }
            }
            KernelChoice::ManyControls => {
                let kernel = kernel_matrix(design, choice)?;
                Rep::Dense {
                    kernel,
                    d,
                    z: z.clone(),
                }
            }
        };
        Ok(CfEngine {
            blocks,
            zz,
            zd,
            czz,
            czd,
            rep,
        })
    }

    /// Lifted residual `eps_g(b)` for cluster `g`.
    fn lift_eps(&self, g: usize, e: &ArrayView1<f64>) -> Array1<f64> {
        match &self.rep {
            Rep::Factored { f, .. } => f[g].dot(e),
            Rep::Dense { d, .. } => d.slice(s![self.blocks.range(g), ..]).dot(e),
        }
    }

    /// Lifted `eps_g(b) - Z_g gamma` for cluster `g`.
    fn lift_adjusted(&self, g: usize, e: &ArrayView1<f64>, gamma: &Array1<f64>) -> Array1<f64> {
        match &self.rep {
            Rep::Factored { f, r, .. } => f[g].dot(e) - r[g].dot(gamma),
            Rep::Dense { d, z, .. } => {
                let rg = self.blocks.range(g);
                d.slice(s![rg.clone(), ..]).dot(e) - z.slice(s![rg, ..]).dot(gamma)
            }
        }
    }

    /// Lifted regressor columns for cluster `g` (`dim x p`).
    fn lift_x(&self, g: usize) -> Array2<f64> {
        match &self.rep {
            Rep::Factored { f, .. } => f[g].slice(s![.., 1..]).to_owned(),
            Rep::Dense { d, .. } => d
                .slice(s![self.blocks.range(g), 1..])
                .to_owned(),
        }
    }

    /// Apply `(I - S_g)^{-1}` to a lifted vector (symmetric kernel only).
    fn tilde_vec(&self, tilde: &[Array2<f64>], g: usize, v: &Array1<f64>) -> Array1<f64> {
        chol_solve(&tilde[g].view(), &v.view())
    }

    /// Bilinear form `u' K_[g,h] v` for lifted `u` on cluster `g` and
    /// lifted `v` on cluster `h` (`g != h`).
    fn cross(&self, g: usize, h: usize, u: &Array1<f64>, v: &Array1<f64>) -> f64 {
        match &self.rep {
            Rep::Factored { tilde, .. } => match tilde {
                None => u.dot(v),
                Some(t) => {
                    0.5 * (self.tilde_vec(t, g, u).dot(v) + u.dot(&self.tilde_vec(t, h, v)))
                }
            },
            Rep::Dense { kernel, .. } => {
                let kgh = kernel.slice(s![self.blocks.range(g), self.blocks.range(h)]);
                u.dot(&kgh.dot(v))
            }
        }
    }

    /// Matrix form `A' K_[g,h] v` for lifted columns `A` on cluster `g`.
    fn cross_mat(&self, g: usize, h: usize, a: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
        match &self.rep {
            Rep::Factored { tilde, .. } => match tilde {
                None => a.t().dot(v),
                Some(t) => {
                    let ta = chol_solve_mat(&t[g].view(), &a.view());
                    (ta.t().dot(v) + a.t().dot(&self.tilde_vec(t, h, v))) * 0.5
                }
            },
            Rep::Dense { kernel, .. } => {
                let kgh = kernel.slice(s![self.blocks.range(g), self.blocks.range(h)]);
                a.t().dot(&kgh.dot(v))
            }
        }
    }

    /// Leave-out coefficient `gamma` solving the normal equations with the
    /// given clusters removed.
    fn leave_out_gamma(&self, drop: &[usize], e: &ArrayView1<f64>) -> Result<Array1<f64>> {
        let mut a = self.zz.clone();
        let mut rhs_m = self.zd.clone();
        for &g in drop {
            a -= &self.czz[g];
            rhs_m -= &self.czd[g];
        }
        let l = cholesky(&a.view())
            .ok_or_else(|| Error::RankDeficientAfterDrop(drop.to_vec()))?;
        let rhs = rhs_m.dot(e);
        Ok(chol_solve(&l.view(), &rhs.view()))
    }
}

/// Cross-fit `(v_ar_raw, v_s, c)` per the leave-clusters-out displays. The
/// score variance's triple sum uses leave-one-cluster-out residuals in its
/// middle factor; the pair terms use leave-pair-out residuals.
pub(crate) fn cross_fit_components(
    design: &ClusteredDesign,
    e: &ArrayView1<f64>,
    choice: KernelChoice,
) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    let engine = CfEngine::new(design, choice)?;
    let gnum = design.g();
    let p = design.p();
    let n = design.n() as f64;
    let k = design.k() as f64;

    // Per-cluster lifted residuals and regressors.
    let eps: Vec<Array1<f64>> = (0..gnum).map(|g| engine.lift_eps(g, e)).collect();
    let xs: Vec<Array2<f64>> = (0..gnum).map(|g| engine.lift_x(g)).collect();
    // Leave-one-out adjusted residuals v_h = eps_h - Z_h gamma_{-h}.
    let mut single: Vec<Array1<f64>> = Vec::with_capacity(gnum);
    for h in 0..gnum {
        let gamma = engine.leave_out_gamma(&[h], e)?;
        single.push(engine.lift_adjusted(h, e, &gamma));
    }

    let mut v_ar = 0.0f64;
    let mut c = Array1::<f64>::zeros(p);
    let mut pair_term = Array2::<f64>::zeros((p, p));
    // Factors of the triple term, accumulated per middle cluster h.
    let mut c_h = vec![Array1::<f64>::zeros(p); gnum]; // sum_g X_g' K_gh v_h
    let mut w_h = vec![Array1::<f64>::zeros(p); gnum]; // sum_g X_g' K_gh eps_h

    for g in 0..gnum {
        for h in g + 1..gnum {
            let gamma = engine.leave_out_gamma(&[g, h], e)?;
            let u_g = engine.lift_adjusted(g, e, &gamma); // (eps - fit)_[g]
            let u_h = engine.lift_adjusted(h, e, &gamma); // (eps - fit)_[h]

            let ug_ke_h = engine.cross(g, h, &u_g, &eps[h]);
            let uh_ke_g = engine.cross(h, g, &u_h, &eps[g]);
            v_ar += 2.0 * ug_ke_h * uh_ke_g;

            // Covariance: X_g' K_gh u_hg times u_gh' K_gh eps_h, plus the
            // mirrored orientation.
            let xg_ku_h = engine.cross_mat(g, h, &xs[g], &u_h);
            let xh_ku_g = engine.cross_mat(h, g, &xs[h], &u_g);
            for i in 0..p {
                c[i] += xg_ku_h[i] * ug_ke_h + xh_ku_g[i] * uh_ke_g;
            }

            // Score-variance pair term: (X_g' K_gh eps_h)(u_gh' K_gh X_h)',
            // both orientations.
            let b_gh = engine.cross_mat(g, h, &xs[g], &eps[h]);
            let b_hg = engine.cross_mat(h, g, &xs[h], &eps[g]);
            for i in 0..p {
                for j in 0..p {
                    pair_term[(i, j)] += b_gh[i] * xh_ku_g[j] + b_hg[i] * xg_ku_h[j];
                }
            }

            // Triple-term factors (middle cluster h or g respectively).
            let xg_kv_h = engine.cross_mat(g, h, &xs[g], &single[h]);
            let xh_kv_g = engine.cross_mat(h, g, &xs[h], &single[g]);
            for i in 0..p {
                c_h[h][i] += xg_kv_h[i];
                c_h[g][i] += xh_kv_g[i];
                w_h[h][i] += b_gh[i];
                w_h[g][i] += b_hg[i];
            }
        }
    }

    let mut v_s = pair_term;
    for h in 0..gnum {
        for i in 0..p {
            for j in 0..p {
                v_s[(i, j)] += c_h[h][i] * w_h[h][j];
            }
        }
    }
    v_s /= n;
    Ok((2.0 * v_ar / k, v_s, c * 2.0 / (n * k).sqrt()))
}
