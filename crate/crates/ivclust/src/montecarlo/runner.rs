//! Size and power experiment drivers.
//!
//! Each replication simulates one dataset and evaluates every requested
//! method at every hypothesized coefficient, sharing the beta-independent
//! precomputations (instrument QR, pairwise moment table, per-cluster moment
//! slopes) across cells.  Replications are keyed by index and statistically
//! independent, so the runner parallelizes over them with a commutative sum
//! reduction: tables are bit-identical at any thread count.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};

use crate::dist::{chi2_quantile, normal_quantile};
use crate::error::{Error, Result};
use crate::inference::{cluster_ar_from_moments, critical_value};
use crate::jackknife::{e_vec, KernelChoice};
use crate::linalg::{frob_sq, PivotedQr};
use crate::miar::{clmi_from_projection, projection_from_moments};
use crate::montecarlo::dgp::{simulate_dataset, McConfig};

use crate::design::ClusteredDesign;
use crate::jackknife::MomentTable;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Methods the experiment drivers know how to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McMethod {
    /// Cluster jackknife AR test (plain kernel, plain variance).
    CljAr,
    /// Cluster jackknife score test (plain kernel, plain variance).
    CljScore,
    /// Cluster many-instrument AR test.
    ClmiAr,
    /// Classical AR with cluster-robust moment covariance.
    ClusterAr,
    /// Observation-level jackknife AR that ignores clustering.
    NaiveJackknifeAr,
    /// Degenerate benchmark that rejects every replication.
    AlwaysReject,
}

impl McMethod {
    fn tag(self) -> &'static str {
        match self {
            McMethod::CljAr => "clj-ar",
            McMethod::CljScore => "clj-score",
            McMethod::ClmiAr => "clmi-ar",
            McMethod::ClusterAr => "cluster-ar",
            McMethod::NaiveJackknifeAr => "naive-jackknife-ar",
            McMethod::AlwaysReject => "always-reject",
        }
    }
}

impl fmt::Display for McMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for McMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clj-ar" => Ok(McMethod::CljAr),
            "clj-score" => Ok(McMethod::CljScore),
            "clmi-ar" => Ok(McMethod::ClmiAr),
            "cluster-ar" => Ok(McMethod::ClusterAr),
            "naive-jackknife-ar" => Ok(McMethod::NaiveJackknifeAr),
            "always-reject" => Ok(McMethod::AlwaysReject),
            other => Err(Error::InvalidConfig(format!(
                "unknown method '{other}' (expected clj-ar, clj-score, clmi-ar, \
                 cluster-ar, naive-jackknife-ar, or always-reject)"
            ))),
        }
    }
}

/// One (method, design point) cell of an experiment table.
#[derive(Debug, Clone)]
pub struct RejectionRow {
    /// Method tag, as printed by [`McMethod`].
    pub method: String,
    /// The varying design quantity: instrument count for size experiments,
    /// hypothesized coefficient for power experiments.
    pub key: f64,
    /// Rejection rate among replications that evaluated successfully.
    pub rate: f64,
    /// Binomial standard error of `rate` over the successful replications.
    pub se: f64,
    /// Total replications attempted.
    pub reps: usize,
    /// Replications on which this method failed to evaluate.
    pub errors: usize,
}

/// Experiment output: one row per (method, key) cell.
#[derive(Debug, Clone)]
pub struct RejectionTable {
    /// Name of the key column ("k" or "beta_star").
    pub key_name: String,
    pub rows: Vec<RejectionRow>,
}

impl RejectionTable {
    /// Render as CSV with a fixed header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,k_or_beta,rate,se,reps,errors\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method, r.key, r.rate, r.se, r.reps, r.errors
            ));
        }
        out
    }

    /// Render as a JSON value.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "key": self.key_name,
            "rows": self.rows.iter().map(|r| {
                serde_json::json!({
                    "method": r.method,
                    "key": r.key,
                    "rate": r.rate,
                    "se": r.se,
                    "reps": r.reps,
                    "errors": r.errors,
                })
            }).collect::<Vec<_>>(),
        })
    }

    /// Look up a cell by method tag and key (exact float match on the key as
    /// stored, which the drivers copy verbatim from the request).
    pub fn cell(&self, method: &str, key: f64) -> Option<&RejectionRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.key == key)
    }
}

#[derive(Clone, Copy)]
struct Thresholds {
    /// One-sided studentized threshold shared by the jackknife-type tests.
    clj: f64,
    /// Chi-square upper quantile for the classical cluster AR test.
    chi2_k: f64,
    /// Two-sided normal threshold for the score test.
    z_two_sided: f64,
}

impl Thresholds {
    fn at(k: usize, alpha: f64) -> Self {
        Thresholds {
            clj: critical_value(k, alpha),
            chi2_k: chi2_quantile(k as f64, 1.0 - alpha),
            z_two_sided: normal_quantile(1.0 - alpha / 2.0),
        }
    }
}

/// Per-cell tally: (rejections, failed evaluations).
type Counts = (u64, u64);

fn sum_counts(mut a: Vec<Counts>, b: Vec<Counts>) -> Vec<Counts> {
    for (x, y) in a.iter_mut().zip(b) {
        x.0 += y.0;
        x.1 += y.1;
    }
    a
}

#[derive(Clone, Copy)]
enum Decision {
    Reject,
    Accept,
    Fail,
}

fn record(out: &mut [Counts], cell: usize, d: Decision) {
    match d {
        Decision::Reject => out[cell].0 += 1,
        Decision::Accept => {}
        Decision::Fail => out[cell].1 += 1,
    }
}

/// Decision for a studentized AR-type statistic under the plain-variance
/// policy: a materially negative variance is a failure, a zero (or
/// negligibly negative) variance reports non-rejection, and otherwise the
/// test rejects when the t-ratio exceeds the one-sided threshold.
fn ar_decision(ar: f64, v: f64, threshold: f64) -> Decision {
    if v < -1e-12 {
        Decision::Fail
    } else if v <= 0.0 {
        Decision::Accept
    } else if ar / v.sqrt() > threshold {
        Decision::Reject
    } else {
        Decision::Accept
    }
}

/// Beta-independent work shared across all hypothesized coefficients within
/// one replication.
struct RepState {
    design: ClusteredDesign,
    /// Pairwise moment table for the jackknife tests, if any were requested.
    table: Option<Result<MomentTable>>,
    /// Per-cluster `Z_g' [y X]_g`, so moment rows at `b` are `zd_g e(b)`.
    zd: Option<Vec<Array2<f64>>>,
    /// Thin Q of the instrument QR plus its row leverages, for the naive
    /// observation-level jackknife.
    naive: Option<Result<(Array2<f64>, Vec<f64>)>>,
}

impl RepState {
    fn prepare(design: ClusteredDesign, methods: &[McMethod]) -> Self {
        let wants = |m: &McMethod| methods.contains(m);
        let table = (wants(&McMethod::CljAr) || wants(&McMethod::CljScore))
            .then(|| MomentTable::from_design(&design, KernelChoice::PlainClusterJackknife));
        let zd = (wants(&McMethod::ClmiAr) || wants(&McMethod::ClusterAr)).then(|| {
            let mut d = Array2::<f64>::zeros((design.n(), design.p() + 1));
            d.column_mut(0).assign(design.y());
            d.slice_mut(s![.., 1..]).assign(design.x());
            design
                .blocks()
                .iter()
                .map(|(_, r)| {
                    design
                        .z()
                        .slice(s![r.clone(), ..])
                        .t()
                        .dot(&d.slice(s![r, ..]))
                })
                .collect()
        });
        let naive = wants(&McMethod::NaiveJackknifeAr).then(|| {
            let qr = PivotedQr::factor(&design.z().view());
            if !qr.is_full_column_rank() {
                return Err(Error::RankDeficient {
                    observed: qr.rank(),
                    expected: design.k(),
                });
            }
            let q = qr.thin_q();
            let p_ii = q
                .axis_iter(Axis(0))
                .map(|row| row.dot(&row))
                .collect::<Vec<f64>>();
            Ok((q, p_ii))
        });
        RepState {
            design,
            table,
            zd,
            naive,
        }
    }

    /// Moment matrix `M(b)` with rows `Z_g' eps_g(b)`.
    fn moments(&self, e: &Array1<f64>) -> Array2<f64> {
        let zd = self.zd.as_ref().expect("moments requested without zd");
        let mut m = Array2::<f64>::zeros((zd.len(), self.design.k()));
        for (g, block) in zd.iter().enumerate() {
            m.row_mut(g).assign(&block.dot(e));
        }
        m
    }

    fn naive_decision(&self, beta: f64, th: &Thresholds) -> Decision {
        let (q, p_ii) = match self.naive.as_ref().expect("naive state missing") {
            Ok(pair) => pair,
            Err(_) => return Decision::Fail,
        };
        let eps = self.design.y() - &(self.design.x().column(0).to_owned() * beta);
        let k = self.design.k() as f64;
        let qe = q.t().dot(&eps);
        let mut diag_sq = 0.0;
        let mut diag_quad = 0.0;
        for (i, &p) in p_ii.iter().enumerate() {
            let e2 = eps[i] * eps[i];
            diag_sq += p * e2;
            diag_quad += p * p * e2 * e2;
        }
        let ar = (qe.dot(&qe) - diag_sq) / k.sqrt();
        // ||diag(eps) P diag(eps)||_F^2 equals ||A'A||_F^2 for A = diag(eps)Q.
        let a = q * &eps.view().insert_axis(Axis(1));
        let b = a.t().dot(&a);
        let v = (frob_sq(&b.view()) - diag_quad) * 2.0 / k;
        ar_decision(ar, v, th.clj)
    }

    fn decide(&self, method: McMethod, beta: f64, th: &Thresholds) -> Decision {
        let e = e_vec(&Array1::from_elem(1, beta).view());
        match method {
            McMethod::AlwaysReject => Decision::Reject,
            McMethod::CljAr => match self.table.as_ref().expect("table missing") {
                Err(_) => Decision::Fail,
                Ok(tab) => {
                    let (v_ar, _, _) = tab.plain_components(&e.view());
                    ar_decision(tab.ar(&e.view()), v_ar, th.clj)
                }
            },
            McMethod::CljScore => match self.table.as_ref().expect("table missing") {
                Err(_) => Decision::Fail,
                Ok(tab) => {
                    let (_, v_s, _) = tab.plain_components(&e.view());
                    let v = v_s[(0, 0)];
                    if v <= 0.0 {
                        return Decision::Fail;
                    }
                    let t = tab.score(&e.view())[0] / v.sqrt();
                    if t.abs() > th.z_two_sided {
                        Decision::Reject
                    } else {
                        Decision::Accept
                    }
                }
            },
            McMethod::ClmiAr => {
                if self.design.k() >= self.design.g() {
                    return Decision::Fail;
                }
                let m = self.moments(&e);
                match projection_from_moments(&m)
                    .and_then(|proj| clmi_from_projection(&proj.p, proj.k))
                {
                    Err(_) => Decision::Fail,
                    Ok((stat, _)) => {
                        if stat > th.clj {
                            Decision::Reject
                        } else {
                            Decision::Accept
                        }
                    }
                }
            }
            McMethod::ClusterAr => {
                let m = self.moments(&e);
                match cluster_ar_from_moments(&m) {
                    Err(_) => Decision::Fail,
                    Ok(stat) => {
                        if stat > th.chi2_k {
                            Decision::Reject
                        } else {
                            Decision::Accept
                        }
                    }
                }
            }
            McMethod::NaiveJackknifeAr => self.naive_decision(beta, th),
        }
    }
}

/// Evaluate one replication over all (method, beta) cells.
fn rep_counts(
    config: &McConfig,
    rep: u64,
    methods: &[McMethod],
    betas: &[f64],
    th: &Thresholds,
) -> Vec<Counts> {
    let mut out = vec![(0u64, 0u64); methods.len() * betas.len()];
    let design = match simulate_dataset(config, rep) {
        Ok((design, _)) => design,
        Err(_) => {
            for c in &mut out {
                c.1 = 1;
            }
            return out;
        }
    };
    let state = RepState::prepare(design, methods);
    for (mi, &method) in methods.iter().enumerate() {
        for (bi, &beta) in betas.iter().enumerate() {
            let d = state.decide(method, beta, th);
            record(&mut out, mi * betas.len() + bi, d);
        }
    }
    out
}

/// Run `eval` over `0..reps` and sum the per-cell tallies.
///
/// With the `parallel` feature, `threads: None` uses the ambient rayon pool,
/// `Some(1)` runs strictly sequentially, and `Some(t)` builds a dedicated
/// pool of `t` threads.  Without the feature the run is always sequential.
fn aggregate<F>(reps: usize, cells: usize, threads: Option<usize>, eval: F) -> Result<Vec<Counts>>
where
    F: Fn(u64) -> Vec<Counts> + Sync + Send,
{
    if let Some(0) = threads {
        return Err(Error::InvalidConfig("threads must be positive".into()));
    }
    let zero = vec![(0u64, 0u64); cells];
    #[cfg(feature = "parallel")]
    {
        let run_par = || {
            (0..reps as u64)
                .into_par_iter()
                .map(&eval)
                .reduce(|| zero.clone(), sum_counts)
        };
        match threads {
            Some(1) => Ok((0..reps as u64).map(&eval).fold(zero.clone(), sum_counts)),
            Some(t) => Ok(rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
                .install(run_par)),
            None => Ok(run_par()),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok((0..reps as u64).map(&eval).fold(zero, sum_counts))
    }
}

fn rows_from_counts(
    counts: &[Counts],
    methods: &[McMethod],
    keys: &[f64],
    reps: usize,
    rows: &mut Vec<RejectionRow>,
) {
    for (mi, &method) in methods.iter().enumerate() {
        for (bi, &key) in keys.iter().enumerate() {
            let (rejects, fails) = counts[mi * keys.len() + bi];
            let ok = reps as u64 - fails;
            let rate = if ok > 0 {
                rejects as f64 / ok as f64
            } else {
                f64::NAN
            };
            let se = if ok > 0 {
                (rate * (1.0 - rate) / ok as f64).sqrt()
            } else {
                f64::NAN
            };
            rows.push(RejectionRow {
                method: method.to_string(),
                key,
                rate,
                se,
                reps,
                errors: fails as usize,
            });
        }
    }
}

fn check_methods(methods: &[McMethod]) -> Result<()> {
    if methods.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one method is required".into(),
        ));
    }
    Ok(())
}

/// Null rejection rates across instrument counts.
///
/// For each `k` the data are generated and tested at the configuration's
/// true coefficient, so every rate estimates the size of the corresponding
/// test.  Rows appear in `(k, method)` request order.
pub fn size_experiment(
    config: &McConfig,
    methods: &[McMethod],
    k_list: &[usize],
    threads: Option<usize>,
) -> Result<RejectionTable> {
    check_methods(methods)?;
    if k_list.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one instrument count is required".into(),
        ));
    }
    config.validate()?;
    let mut rows = Vec::with_capacity(methods.len() * k_list.len());
    for &k in k_list {
        let cfg = McConfig {
            k,
            ..config.clone()
        };
        cfg.validate()?;
        let th = Thresholds::at(k, cfg.alpha);
        let betas = [cfg.beta0];
        let counts = aggregate(cfg.reps, methods.len(), threads, |rep| {
            rep_counts(&cfg, rep, methods, &betas, &th)
        })?;
        rows_from_counts(&counts, methods, &[k as f64], cfg.reps, &mut rows);
    }
    Ok(RejectionTable {
        key_name: "k".into(),
        rows,
    })
}

/// Rejection rates across hypothesized coefficients.
///
/// The data are generated at the configuration's true coefficient; each test
/// evaluates the hypothesis `beta = beta_star` for every grid entry, so the
/// entry at `beta_star = beta0` reproduces the size experiment and the
/// others trace the power curve.
pub fn power_experiment(
    config: &McConfig,
    methods: &[McMethod],
    beta_star_grid: &[f64],
    threads: Option<usize>,
) -> Result<RejectionTable> {
    check_methods(methods)?;
    if beta_star_grid.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one hypothesized coefficient is required".into(),
        ));
    }
    if beta_star_grid.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidConfig(
            "hypothesized coefficients must be finite".into(),
        ));
    }
    config.validate()?;
    let th = Thresholds::at(config.k, config.alpha);
    let counts = aggregate(
        config.reps,
        methods.len() * beta_star_grid.len(),
        threads,
        |rep| rep_counts(config, rep, methods, beta_star_grid, &th),
    )?;
    let mut rows = Vec::with_capacity(methods.len() * beta_star_grid.len());
    rows_from_counts(&counts, methods, beta_star_grid, config.reps, &mut rows);
    Ok(RejectionTable {
        key_name: "beta_star".into(),
        rows,
    })
}
