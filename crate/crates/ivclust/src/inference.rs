//! Hypothesis tests, rejection rules, p-values, and confidence sets by
//! test inversion.
//!
//! AR-type statistics are compared one-sided against the shifted and scaled
//! chi-square critical value `(chi2_{k,1-a} - k) / sqrt(2k)`, which matches
//! the normal threshold as `k` grows while correcting the right-skewness of
//! the null distribution at small `k`. The score test is two-sided normal
//! for a single endogenous regressor and a Wald form otherwise. All
//! decisions use strict inequalities, so `reject` is equivalent to
//! `p_value < alpha`.

use ndarray::prelude::*;

use crate::design::ClusteredDesign;
use crate::dist::{chi2_quantile, chi2_sf, normal_quantile, normal_sf};
use crate::error::{Error, Result};
use crate::jackknife::{
    bundle_from_raw, cross_fit_components, e_vec, KernelChoice, MomentTable, VarianceBundle,
    VarianceEstimator,
};
use crate::linalg::{cholesky, chol_solve};
use crate::miar::{clmi_from_projection, cluster_moments, projection_from_moments};

/// Test families exposed by the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Classical AR quadratic form with a cluster-robust moment covariance,
    /// compared to chi-square with k degrees of freedom.
    ClusterAr,
    /// Cluster jackknife AR, one-sided against the shifted-scaled
    /// chi-square critical value.
    CljAr {
        kernel: KernelChoice,
        estimator: VarianceEstimator,
    },
    /// Cluster jackknife score test.
    CljScore {
        kernel: KernelChoice,
        estimator: VarianceEstimator,
    },
    /// Cluster many-instrument AR from summed cluster moments.
    ClmiAr,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::ClusterAr => write!(f, "cluster-ar"),
            Method::CljAr { kernel, estimator } => {
                write!(f, "clj-ar[{}]", tags(*kernel, *estimator))
            }
            Method::CljScore { kernel, estimator } => {
                write!(f, "clj-score[{}]", tags(*kernel, *estimator))
            }
            Method::ClmiAr => write!(f, "clmi-ar"),
        }
    }
}

fn tags(kernel: KernelChoice, estimator: VarianceEstimator) -> String {
    let k = match kernel {
        KernelChoice::PlainClusterJackknife => "plain",
        KernelChoice::SymmetricClusterJackknife => "symmetric",
        KernelChoice::ManyControls => "many-controls",
    };
    let e = match estimator {
        VarianceEstimator::Plain => "plain",
        VarianceEstimator::CrossFit => "cross-fit",
    };
    format!("{k},{e}")
}

/// Result of a single hypothesis test.
#[derive(Debug, Clone)]
pub struct TestOutcome {
    pub method: Method,
    /// The tested coefficient value.
    pub beta: Array1<f64>,
    /// The decision statistic: studentized AR (one-sided), signed score
    /// t-ratio (two-sided, p = 1), Wald form (p > 1), or the chi-square
    /// quadratic form for the cluster AR test. NaN when the variance
    /// degenerated and the test conservatively does not reject.
    pub statistic: f64,
    /// Critical value the statistic is compared against.
    pub threshold: f64,
    /// Primary p-value, consistent with the rejection rule.
    pub p_value: f64,
    /// Secondary normal-tail p-value for the AR-type statistics whose
    /// primary p-value uses the shifted-scaled chi-square mapping.
    pub p_value_normal: Option<f64>,
    pub reject: bool,
    pub alpha: f64,
    pub k: usize,
    pub g: usize,
    pub n: usize,
    /// Non-fatal conditions encountered (e.g. a clamped variance).
    pub warnings: Vec<String>,
}

/// One-sided critical value `(chi2_{k,1-alpha} - k) / sqrt(2k)` for the
/// studentized AR-type statistics.
pub fn critical_value(k: usize, alpha: f64) -> f64 {
    let kf = k as f64;
    (chi2_quantile(kf, 1.0 - alpha) - kf) / (2.0 * kf).sqrt()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Classical AR test with cluster-robust moment covariance: the quadratic
/// form `eps'Z (sum_g Z_g' eps_g eps_g' Z_g)^{-1} Z'eps` against the
/// chi-square upper tail with k degrees of freedom.
pub fn cluster_ar_test(
    design: &ClusteredDesign,
    beta: &ArrayView1<f64>,
    alpha: f64,
) -> Result<TestOutcome> {
    check_alpha(alpha)?;
    let m = cluster_moments(design, beta)?;
    let stat = cluster_ar_from_moments(&m)?;
    let k = design.k();
    let threshold = chi2_quantile(k as f64, 1.0 - alpha);
    let p_value = chi2_sf(k as f64, stat);
    Ok(TestOutcome {
        method: Method::ClusterAr,
        beta: beta.to_owned(),
        statistic: stat,
        threshold,
        p_value,
        p_value_normal: None,
        reject: stat > threshold,
        alpha,
        k,
        g: design.g(),
        n: design.n(),
        warnings: Vec::new(),
    })
}

/// The cluster AR quadratic form from the moment matrix: with `s = M'iota`
/// and `W = M'M`, the statistic is `s' W^{-1} s`.
pub(crate) fn cluster_ar_from_moments(m: &Array2<f64>) -> Result<f64> {
    let w = m.t().dot(m);
    let l = cholesky(&w.view()).ok_or(Error::SingularMomentCovariance)?;
    let s = m.sum_axis(Axis(0));
    let sol = chol_solve(&l.view(), &s.view());
    Ok(s.dot(&sol))
}

/// Cluster jackknife AR test: studentized statistic against
/// [`critical_value`], p-value via the chi-square mapping
/// `1 - F_{chi2_k}(k + sqrt(2k) t)`.
pub fn clj_test(
    design: &ClusteredDesign,
    beta: &ArrayView1<f64>,
    alpha: f64,
    choice: KernelChoice,
    estimator: VarianceEstimator,
) -> Result<TestOutcome> {
    check_alpha(alpha)?;
    let e = e_vec(beta);
    let table = MomentTable::from_design(design, choice)?;
    let ar = table.ar(&e.view());
    let bundle = bundle_at(design, &e.view(), &table, choice, estimator)?;
    Ok(clj_outcome_from_parts(
        ar,
        &bundle,
        Method::CljAr {
            kernel: choice,
            estimator,
        },
        beta.to_owned(),
        alpha,
        design.k(),
        design.g(),
        design.n(),
    ))
}

fn bundle_at(
    design: &ClusteredDesign,
    e: &ArrayView1<f64>,
    table: &MomentTable,
    choice: KernelChoice,
    estimator: VarianceEstimator,
) -> Result<VarianceBundle> {
    let (v_ar_raw, v_s, c) = match estimator {
        VarianceEstimator::Plain => table.plain_components(e),
        VarianceEstimator::CrossFit => cross_fit_components(design, e, choice)?,
    };
    bundle_from_raw(v_ar_raw, v_s, c, estimator)
}

/// Assemble a CLJ-AR outcome from the raw statistic and variance bundle.
#[allow(clippy::too_many_arguments)]
pub(crate) fn clj_outcome_from_parts(
    ar: f64,
    bundle: &VarianceBundle,
    method: Method,
    beta: Array1<f64>,
    alpha: f64,
    k: usize,
    g: usize,
    n: usize,
) -> TestOutcome {
    let kf = k as f64;
    let threshold = critical_value(k, alpha);
    let mut warnings = Vec::new();
    if bundle.clamped {
        warnings.push(format!(
            "cross-fit AR variance {:.3e} clamped to zero; reporting non-rejection",
            bundle.v_ar_raw
        ));
    }
    let (statistic, p_value, p_value_normal, reject) = if bundle.v_ar > 0.0 {
        let t = ar / bundle.v_ar.sqrt();
        let p = chi2_sf(kf, kf + (2.0 * kf).sqrt() * t);
        (t, p, Some(normal_sf(t)), t > threshold)
    } else {
        if !bundle.clamped {
            warnings.push("AR variance is zero; reporting non-rejection".into());
        }
        (f64::NAN, 1.0, None, false)
    };
    TestOutcome {
        method,
        beta,
        statistic,
        threshold,
        p_value,
        p_value_normal,
        reject,
        alpha,
        k,
        g,
        n,
        warnings,
    }
}

/// Cluster jackknife score test: two-sided normal for one endogenous
/// regressor, Wald chi-square with p degrees of freedom otherwise.
pub fn clj_score_test(
    design: &ClusteredDesign,
    beta: &ArrayView1<f64>,
    alpha: f64,
    choice: KernelChoice,
    estimator: VarianceEstimator,
) -> Result<TestOutcome> {
    check_alpha(alpha)?;
    let e = e_vec(beta);
    let table = MomentTable::from_design(design, choice)?;
    let s = table.score(&e.view());
    let bundle = bundle_at(design, &e.view(), &table, choice, estimator)?;
    score_outcome_from_parts(
        &s,
        &bundle.v_s,
        Method::CljScore {
            kernel: choice,
            estimator,
        },
        beta.to_owned(),
        alpha,
        design.k(),
        design.g(),
        design.n(),
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn score_outcome_from_parts(
    s: &Array1<f64>,
    v_s: &Array2<f64>,
    method: Method,
    beta: Array1<f64>,
    alpha: f64,
    k: usize,
    g: usize,
    n: usize,
) -> Result<TestOutcome> {
    let p = s.len();
    let (statistic, threshold, p_value, reject) = if p == 1 {
        let v = v_s[(0, 0)];
        if v <= 0.0 {
            return Err(Error::SingularScoreVariance);
        }
        let t = s[0] / v.sqrt();
        let threshold = normal_quantile(1.0 - alpha / 2.0);
        let p_value = 2.0 * normal_sf(t.abs());
        (t, threshold, p_value, t.abs() > threshold)
    } else {
        let l = cholesky(&v_s.view()).ok_or(Error::SingularScoreVariance)?;
        let sol = chol_solve(&l.view(), &s.view());
        let wald = s.dot(&sol);
        let pf = p as f64;
        let threshold = chi2_quantile(pf, 1.0 - alpha);
        let p_value = chi2_sf(pf, wald);
        (wald, threshold, p_value, wald > threshold)
    };
    Ok(TestOutcome {
        method,
        beta,
        statistic,
        threshold,
        p_value,
        p_value_normal: None,
        reject,
        alpha,
        k,
        g,
        n,
        warnings: Vec::new(),
    })
}

/// Cluster many-instrument AR test with the same shifted-scaled chi-square
/// rule as [`clj_test`].
pub fn clmi_test(
    design: &ClusteredDesign,
    beta: &ArrayView1<f64>,
    alpha: f64,
) -> Result<TestOutcome> {
    check_alpha(alpha)?;
    let (stat, _) = crate::miar::clmi_statistic(design, beta)?;
    let k = design.k();
    let kf = k as f64;
    let threshold = critical_value(k, alpha);
    Ok(TestOutcome {
        method: Method::ClmiAr,
        beta: beta.to_owned(),
        statistic: stat,
        threshold,
        p_value: chi2_sf(kf, kf + (2.0 * kf).sqrt() * stat),
        p_value_normal: Some(normal_sf(stat)),
        reject: stat > threshold,
        alpha,
        k,
        g: design.g(),
        n: design.n(),
        warnings: Vec::new(),
    })
}

/// Grid on which a confidence set is computed by test inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lo: -2.0,
            hi: 2.0,
            step: 0.005,
        }
    }
}

/// Options for [`invert_confidence_set`].
#[derive(Debug, Clone)]
pub struct InversionOptions {
    pub grid: GridSpec,
    /// Bisect interval boundaries between the last non-rejected and first
    /// rejected grid point down to width 1e-4.
    pub refine: bool,
}

impl Default for InversionOptions {
    fn default() -> Self {
        InversionOptions {
            grid: GridSpec::default(),
            refine: true,
        }
    }
}

/// Confidence set for a scalar coefficient, as a union of disjoint
/// intervals.
#[derive(Debug, Clone)]
pub struct ConfidenceSet {
    pub alpha: f64,
    pub method: Method,
    /// Ordered, disjoint closed intervals of non-rejected values.
    pub intervals: Vec<(f64, f64)>,
    pub grid: GridSpec,
    pub refined: bool,
    /// Set when the lowest (highest) grid point is not rejected, so the set
    /// may extend beyond the grid.
    pub unbounded_below: bool,
    pub unbounded_above: bool,
    /// Per-grid-point decisions `(beta, reject)` in grid order.
    pub grid_decisions: Vec<(f64, bool)>,
    pub warnings: Vec<String>,
}

const REFINE_WIDTH: f64 = 1e-4;
const MAX_WARNINGS: usize = 10;

/// Per-method evaluator reusing all beta-independent precomputations
/// across grid points.
enum Evaluator<'a> {
    Clj {
        design: &'a ClusteredDesign,
        table: MomentTable,
        score: bool,
        kernel: KernelChoice,
        estimator: VarianceEstimator,
    },
    Moments {
        /// Per-cluster `Z_g' D_g`, so the moment matrix at any beta is one
        /// row per cluster of `zd_g e(beta)`.
        zd: Vec<Array2<f64>>,
        k: usize,
        many_instrument: bool,
    },
}

impl<'a> Evaluator<'a> {
    fn build(design: &'a ClusteredDesign, method: Method) -> Result<Self> {
        match method {
            Method::CljAr { kernel, estimator } => Ok(Evaluator::Clj {
                design,
                table: MomentTable::from_design(design, kernel)?,
                score: false,
                kernel,
                estimator,
            }),
            Method::CljScore { kernel, estimator } => Ok(Evaluator::Clj {
                design,
                table: MomentTable::from_design(design, kernel)?,
                score: true,
                kernel,
                estimator,
            }),
            Method::ClusterAr | Method::ClmiAr => {
                let z = design.z();
                let y = design.y();
                let x = design.x();
                let zd: Vec<Array2<f64>> = design
                    .blocks()
                    .iter()
                    .map(|(_, r)| {
                        let zg = z.slice(s![r.clone(), ..]);
                        let mut d = Array2::<f64>::zeros((r.len(), design.p() + 1));
                        d.column_mut(0).assign(&y.slice(s![r.clone()]));
                        d.slice_mut(s![.., 1..]).assign(&x.slice(s![r, ..]));
                        zg.t().dot(&d)
                    })
                    .collect();
                if method == Method::ClmiAr && design.k() >= design.g() {
                    return Err(Error::TooManyInstruments {
                        k: design.k(),
                        g: design.g(),
                    });
                }
                Ok(Evaluator::Moments {
                    zd,
                    k: design.k(),
                    many_instrument: method == Method::ClmiAr,
                })
            }
        }
    }

    /// Rejection decision at a point; `Err` values are the statistic-level
    /// failures the caller converts to rejected-with-warning.
    fn reject_at(&self, beta: f64, alpha: f64) -> Result<(bool, Option<String>)> {
        let bvec = array![beta];
        let e = e_vec(&bvec.view());
        match self {
            Evaluator::Clj {
                design,
                table,
                score,
                kernel,
                estimator,
            } => {
                let bundle = bundle_at(design, &e.view(), table, *kernel, *estimator)?;
                if *score {
                    let s = table.score(&e.view());
                    let out = score_outcome_from_parts(
                        &s,
                        &bundle.v_s,
                        Method::CljScore {
                            kernel: *kernel,
                            estimator: *estimator,
                        },
                        bvec,
                        alpha,
                        design.k(),
                        design.g(),
                        design.n(),
                    )?;
                    Ok((out.reject, None))
                } else {
                    let ar = table.ar(&e.view());
                    let out = clj_outcome_from_parts(
                        ar,
                        &bundle,
                        Method::CljAr {
                            kernel: *kernel,
                            estimator: *estimator,
                        },
                        bvec,
                        alpha,
                        design.k(),
                        design.g(),
                        design.n(),
                    );
                    Ok((out.reject, out.warnings.into_iter().next()))
                }
            }
            Evaluator::Moments {
                zd,
                k,
                many_instrument,
            } => {
                let mut m = Array2::<f64>::zeros((zd.len(), *k));
                for (g, zdg) in zd.iter().enumerate() {
                    m.row_mut(g).assign(&zdg.dot(&e));
                }
                if *many_instrument {
                    let proj = projection_from_moments(&m)?;
                    let (stat, _) = clmi_from_projection(&proj.p, proj.k)?;
                    Ok((stat > critical_value(*k, alpha), None))
                } else {
                    let stat = cluster_ar_from_moments(&m)?;
                    Ok((stat > chi2_quantile(*k as f64, 1.0 - alpha), None))
                }
            }
        }
    }
}

/// Invert a test over a grid of scalar hypotheses into a confidence set.
///
/// Maximal runs of non-rejected grid points become closed intervals. Grid
/// points whose statistic errors are treated as rejections and recorded in
/// `warnings`; points whose variance clamps to zero are non-rejections per
/// the clamping policy. With `refine`, each interior boundary is narrowed
/// by bisection to width at most 1e-4, keeping the non-rejected side as
/// the reported endpoint.
pub fn invert_confidence_set(
    design: &ClusteredDesign,
    method: Method,
    alpha: f64,
    options: &InversionOptions,
) -> Result<ConfidenceSet> {
    check_alpha(alpha)?;
    if design.p() != 1 {
        return Err(Error::UnsupportedDimension(design.p()));
    }
    let grid = options.grid;
    // Negated comparisons so NaN grid parameters fail rather than pass.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(grid.lo < grid.hi) || !(grid.step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "grid must satisfy lo < hi and step > 0, got [{}, {}] step {}",
            grid.lo, grid.hi, grid.step
        )));
    }

    let evaluator = Evaluator::build(design, method)?;
    let mut warnings: Vec<String> = Vec::new();
    let mut suppressed = 0usize;
    let warn = |w: String, warnings: &mut Vec<String>, suppressed: &mut usize| {
        if warnings.len() < MAX_WARNINGS {
            warnings.push(w);
        } else {
            *suppressed += 1;
        }
    };

    let npts = ((grid.hi - grid.lo) / grid.step).floor() as usize + 1;
    let mut points = Vec::with_capacity(npts + 1);
    for i in 0..npts {
        points.push(grid.lo + grid.step * i as f64);
    }
    // Include the upper bound when stepping lands short of it.
    if grid.hi - points[points.len() - 1] > 1e-12 * grid.step.max(1.0) {
        points.push(grid.hi);
    }

    let decide = |beta: f64, warnings: &mut Vec<String>, suppressed: &mut usize| -> bool {
        match evaluator.reject_at(beta, alpha) {
            Ok((reject, maybe_warn)) => {
                if let Some(w) = maybe_warn {
                    warn(format!("beta={beta}: {w}"), warnings, suppressed);
                }
                reject
            }
            Err(err) => {
                warn(
                    format!("beta={beta}: {err}; treated as rejected"),
                    warnings,
                    suppressed,
                );
                true
            }
        }
    };

    let decisions: Vec<(f64, bool)> = points
        .iter()
        .map(|&b| (b, decide(b, &mut warnings, &mut suppressed)))
        .collect();

    // Maximal runs of non-rejections become intervals.
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, &(_, reject)) in decisions.iter().enumerate() {
        match (reject, run_start) {
            (false, None) => run_start = Some(i),
            (true, Some(s)) => {
                intervals.push((points[s], points[i - 1]));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        intervals.push((points[s], points[points.len() - 1]));
    }

    let unbounded_below = decisions.first().map(|&(_, r)| !r).unwrap_or(false);
    let unbounded_above = decisions.last().map(|&(_, r)| !r).unwrap_or(false);

    if options.refine {
        for iv in intervals.iter_mut() {
            // Lower boundary: bracketed by a rejected point one step below.
            if iv.0 > points[0] {
                let mut rej = iv.0 - grid.step;
                let mut acc = iv.0;
                while acc - rej > REFINE_WIDTH {
                    let mid = 0.5 * (acc + rej);
                    if decide(mid, &mut warnings, &mut suppressed) {
                        rej = mid;
                    } else {
                        acc = mid;
                    }
                }
                iv.0 = acc;
            }
            // Upper boundary symmetric.
            if iv.1 < points[points.len() - 1] {
                let mut rej = iv.1 + grid.step;
                let mut acc = iv.1;
                while rej - acc > REFINE_WIDTH {
                    let mid = 0.5 * (acc + rej);
                    if decide(mid, &mut warnings, &mut suppressed) {
                        rej = mid;
                    } else {
                        acc = mid;
                    }
                }
                iv.1 = acc;
            }
        }
    }
    if suppressed > 0 {
        warnings.push(format!("{suppressed} further warnings suppressed"));
    }

    Ok(ConfidenceSet {
        alpha,
        method,
        intervals,
        grid,
        refined: options.refine,
        unbounded_below,
        unbounded_above,
        grid_decisions: decisions,
        warnings,
    })
}
