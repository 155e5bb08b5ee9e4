//! Data-generating process for the size, power, and calibration experiments.
//!
//! Each replication draws a clustered linear IV design with one endogenous
//! regressor.  Cluster sizes follow an exponential profile controlled by an
//! imbalance parameter; instruments, the first-stage error, and the
//! structural error share cluster-level common factors whose weights control
//! within-cluster dependence, error correlation, and instrument-conditional
//! heteroskedasticity.  The first-stage coefficient is scaled so that a
//! concentration-style strength parameter stays comparable across instrument
//! counts and sample sizes.
//!
//! Alongside the simulated design, [`simulate_dataset_split`] returns the
//! exact conditional second moments of the errors given the cluster factors,
//! which calibration tests compare against jackknife variance estimates.

use ndarray::{Array1, Array2};

use crate::blocks::ClusterBlocks;
use crate::design::ClusteredDesign;
use crate::error::{Error, Result};
use crate::montecarlo::rng::{Stream, SALT_ERRORS, SALT_INSTRUMENTS};

/// Parameters of one simulation cell.
#[derive(Debug, Clone)]
pub struct McConfig {
    /// Total number of observations.
    pub n: usize,
    /// Number of clusters.
    pub g: usize,
    /// Cluster-size imbalance: 0 gives equal sizes, larger values
    /// concentrate observations in the last clusters.
    pub gamma: f64,
    /// Weight of the cluster common factor in instruments and errors,
    /// in [0, 1).
    pub zeta: f64,
    /// Correlation between first-stage and structural shocks, in [0, 1].
    pub rho: f64,
    /// Exponent tying the structural error scale to the cluster instrument
    /// factor; 0 switches conditional heteroskedasticity off.
    pub h: f64,
    /// Instrument strength: the first-stage coefficient is
    /// `sqrt(big_r * sqrt(k) / n)` on the first instrument.
    pub big_r: f64,
    /// Number of instruments.
    pub k: usize,
    /// True structural coefficient.
    pub beta0: f64,
    /// Number of Monte Carlo replications.
    pub reps: usize,
    /// Base seed for stream derivation.
    pub base_seed: u64,
    /// Nominal test level.
    pub alpha: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n: 1000,
            g: 100,
            gamma: 6.0,
            zeta: 0.3,
            rho: 0.3,
            h: 1.0,
            big_r: 10.0,
            k: 1,
            beta0: 0.0,
            reps: 2000,
            base_seed: 42,
            alpha: 0.05,
        }
    }
}

impl McConfig {
    /// Check that the configuration describes a feasible experiment.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.g == 0 {
            return Err(Error::InvalidConfig(
                "n and g must be positive".to_string(),
            ));
        }
        if self.n < self.g {
            return Err(Error::InfeasibleSizes { n: self.n, g: self.g });
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.zeta) {
            return Err(Error::InvalidConfig(
                "zeta must lie in [0, 1)".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(
                "rho must lie in [0, 1]".to_string(),
            ));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidConfig(
                "gamma must be finite and nonnegative".to_string(),
            ));
        }
        if !self.h.is_finite() || self.h < 0.0 {
            return Err(Error::InvalidConfig(
                "h must be finite and nonnegative".to_string(),
            ));
        }
        if !self.big_r.is_finite() || self.big_r < 0.0 {
            return Err(Error::InvalidConfig(
                "big_r must be finite and nonnegative".to_string(),
            ));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(
                "alpha must lie strictly between 0 and 1".to_string(),
            ));
        }
        if self.reps == 0 {
            return Err(Error::InvalidConfig(
                "reps must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Exponential-profile cluster sizes before the total is reconciled to `n`.
///
/// The first `g - 1` sizes are `max(1, floor(n * exp(gamma * j / g) / d))`
/// with `d = 1 + sum of the numerators' exponentials`, and the last cluster
/// takes `max(1, n - sum of the others)`.  The first `g - 1` entries are
/// nondecreasing; the remainder cluster can break the pattern.
pub fn cluster_sizes_pre_adjust(n: usize, g: usize, gamma: f64) -> Result<Vec<usize>> {
    if n == 0 || g == 0 || n < g {
        return Err(Error::InfeasibleSizes { n, g });
    }
    let gf = g as f64;
    let denom: f64 = 1.0
        + (1..g)
            .map(|j| (gamma * j as f64 / gf).exp())
            .sum::<f64>();
    let mut sizes: Vec<usize> = (1..g)
        .map(|j| {
            let raw = (n as f64) * (gamma * j as f64 / gf).exp() / denom;
            (raw.floor() as usize).max(1)
        })
        .collect();
    let partial: usize = sizes.iter().sum();
    sizes.push(if n > partial { n - partial } else { 1 });
    Ok(sizes)
}

/// Cluster sizes summing exactly to `n`, all at least 1.
///
/// Starts from [`cluster_sizes_pre_adjust`] and reconciles the total: a
/// shortfall is distributed one observation at a time from the first cluster
/// onward, and an excess (possible when many floors clamp to 1) is removed
/// from the end, never shrinking a cluster below one observation.
pub fn cluster_sizes(n: usize, g: usize, gamma: f64) -> Result<Vec<usize>> {
    let mut sizes = cluster_sizes_pre_adjust(n, g, gamma)?;
    let mut total: usize = sizes.iter().sum();
    let mut idx = 0usize;
    while total < n {
        sizes[idx % g] += 1;
        idx += 1;
        total += 1;
    }
    let mut back = g;
    while total > n {
        back = if back == 0 { g - 1 } else { back - 1 };
        if sizes[back] > 1 {
            sizes[back] -= 1;
            total -= 1;
        }
    }
    debug_assert_eq!(sizes.iter().sum::<usize>(), n);
    Ok(sizes)
}

/// Exact conditional error moments of a simulated design given its cluster
/// factors, in the per-cluster layout the analytic variance routines expect.
pub struct Truth {
    /// True structural coefficient.
    pub beta0: f64,
    /// First-stage coefficient on the first instrument.
    pub pi1: f64,
    /// Conditional structural-error covariance per cluster.
    pub sigma: Vec<Array2<f64>>,
    /// Conditional cross-covariance between first-stage and structural
    /// errors per cluster (one matrix per endogenous regressor).
    pub xi: Vec<Vec<Array2<f64>>>,
    /// Conditional first-stage error covariance per cluster, flattened
    /// row-major over regressor pairs.
    pub omega: Vec<Vec<Array2<f64>>>,
    /// Conditional mean of the endogenous regressor, `Z * pi`.
    pub z_pi: Array2<f64>,
}

/// Simulate one replication, using replication `rep` for both the
/// instrument stream and the error stream.
pub fn simulate_dataset(config: &McConfig, rep: u64) -> Result<(ClusteredDesign, Truth)> {
    simulate_dataset_split(config, rep, rep)
}

/// Simulate one replication with separately indexed instrument and error
/// streams.
///
/// Splitting the indices lets calibration experiments hold the instrument
/// realization fixed (`instrument_rep` constant) while redrawing errors
/// (`error_rep` varying), which is exactly the conditional distribution the
/// analytic variance formulas describe.
pub fn simulate_dataset_split(
    config: &McConfig,
    instrument_rep: u64,
    error_rep: u64,
) -> Result<(ClusteredDesign, Truth)> {
    config.validate()?;
    let n = config.n;
    let g = config.g;
    let k = config.k;
    let sizes = cluster_sizes(n, g, config.gamma)?;
    let blocks = ClusterBlocks::from_sizes(&sizes)?;

    let zeta = config.zeta;
    let rho = config.rho;
    let sz = zeta.sqrt();
    let siz = (1.0 - zeta).sqrt();
    let sr = rho.sqrt();
    let sir = (1.0 - rho).sqrt();

    // Instrument stream: cluster common factors first, then the
    // idiosyncratic matrix in row-major order.
    let mut zs = Stream::derive(config.base_seed, instrument_rep, SALT_INSTRUMENTS);
    let z_cl: Vec<f64> = (0..g).map(|_| zs.normal()).collect();
    let mut z = Array2::<f64>::zeros((n, k));
    for (gi, rows) in blocks.iter() {
        for i in rows {
            for j in 0..k {
                z[(i, j)] = sz * z_cl[gi] + siz * zs.normal();
            }
        }
    }

    // Error stream: per-cluster common shocks first (first-stage factor,
    // then the independent structural factor), then per-row idiosyncratic
    // shocks in the same order.
    let mut es = Stream::derive(config.base_seed, error_rep, SALT_ERRORS);
    let mut eta_common = vec![0.0f64; g];
    let mut eps_common = vec![0.0f64; g];
    for gi in 0..g {
        let eta = es.normal();
        let w1 = es.normal();
        eta_common[gi] = eta;
        eps_common[gi] = sr * eta + sir * w1;
    }

    let pi1 = (config.big_r * (k as f64).sqrt() / n as f64).sqrt();
    let mut x = Array2::<f64>::zeros((n, 1));
    let mut y = Array1::<f64>::zeros(n);
    let mut scale = vec![0.0f64; g];
    for (gi, rows) in blocks.iter() {
        scale[gi] = z_cl[gi].abs().powf(config.h);
        for i in rows {
            let eta_ind = es.normal();
            let w2 = es.normal();
            let eta = sz * eta_common[gi] + siz * eta_ind;
            let eps_ind = sr * eta_ind + sir * w2;
            let eps = sz * scale[gi] * eps_common[gi] + siz * eps_ind;
            let xv = pi1 * z[(i, 0)] + eta;
            x[(i, 0)] = xv;
            y[i] = config.beta0 * xv + eps;
        }
    }

    // Conditional second moments given the cluster factors z_cl.  Within a
    // cluster the structural error is sz*scale*eps_common + siz*eps_ind, the
    // first-stage error is sz*eta_common + siz*eta_ind, and the common and
    // idiosyncratic parts are independent standard normals with
    // cov(eps_common, eta_common) = cov(eps_ind, eta_ind) = sqrt(rho).
    let mut sigma = Vec::with_capacity(g);
    let mut xi = Vec::with_capacity(g);
    let mut omega = Vec::with_capacity(g);
    for (gi, rows) in blocks.iter() {
        let m = rows.len();
        let common_var = zeta * scale[gi] * scale[gi];
        let mut sig = Array2::<f64>::from_elem((m, m), common_var);
        for d in 0..m {
            sig[(d, d)] += 1.0 - zeta;
        }
        let xi_common = sr * zeta * scale[gi];
        let mut xig = Array2::<f64>::from_elem((m, m), xi_common);
        for d in 0..m {
            xig[(d, d)] += sr * (1.0 - zeta);
        }
        let mut om = Array2::<f64>::from_elem((m, m), zeta);
        for d in 0..m {
            om[(d, d)] += 1.0 - zeta;
        }
        sigma.push(sig);
        xi.push(vec![xig]);
        omega.push(vec![om]);
    }
    let mut z_pi = Array2::<f64>::zeros((n, 1));
    for i in 0..n {
        z_pi[(i, 0)] = pi1 * z[(i, 0)];
    }

    let design = ClusteredDesign::new(y, x, z, None, blocks)?;
    let truth = Truth {
        beta0: config.beta0,
        pi1,
        sigma,
        xi,
        omega,
        z_pi,
    };
    Ok((design, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_sum_to_n_and_stay_positive() {
        for &(n, g, gamma) in &[
            (1000usize, 100usize, 6.0f64),
            (1000, 100, 0.0),
            (10, 10, 6.0),
            (60, 20, 6.0),
            (537, 41, 3.25),
            (100, 100, 9.0),
        ] {
            let sizes = cluster_sizes(n, g, gamma).unwrap();
            assert_eq!(sizes.len(), g);
            assert_eq!(sizes.iter().sum::<usize>(), n);
            assert!(sizes.iter().all(|&s| s >= 1));
        }
    }

    #[test]
    fn equal_profile_when_gamma_is_zero() {
        let sizes = cluster_sizes(1000, 100, 0.0).unwrap();
        assert!(sizes.iter().all(|&s| s == 10));
    }

    #[test]
    fn heavy_imbalance_matches_frozen_profile() {
        // Independently computed for n = 1000, g = 100, gamma = 6: sizes
        // start at 1, the largest regular cluster has 58 observations, and
        // the remainder cluster keeps 16.
        let sizes = cluster_sizes(1000, 100, 6.0).unwrap();
        assert_eq!(sizes[0], 1);
        assert_eq!(*sizes.iter().max().unwrap(), 58);
        assert_eq!(sizes[98], 58);
        assert_eq!(sizes[99], 16);
    }

    #[test]
    fn pre_adjust_profile_is_monotone_over_regular_clusters() {
        for &(n, g, gamma) in &[(1000usize, 100usize, 6.0f64), (60, 20, 4.0), (312, 17, 2.0)] {
            let sizes = cluster_sizes_pre_adjust(n, g, gamma).unwrap();
            for w in sizes[..g - 1].windows(2) {
                assert!(w[0] <= w[1], "regular profile must be nondecreasing");
            }
        }
    }

    #[test]
    fn infeasible_sizes_are_rejected() {
        assert!(matches!(
            cluster_sizes(5, 10, 6.0),
            Err(Error::InfeasibleSizes { n: 5, g: 10 })
        ));
        let bad = McConfig {
            n: 5,
            g: 10,
            ..McConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn simulated_design_has_expected_shape() {
        let config = McConfig {
            n: 120,
            g: 12,
            k: 3,
            ..McConfig::default()
        };
        let (design, truth) = simulate_dataset(&config, 0).unwrap();
        assert_eq!(design.n(), 120);
        assert_eq!(design.g(), 12);
        assert_eq!(design.k(), 3);
        assert_eq!(design.p(), 1);
        assert_eq!(truth.sigma.len(), 12);
        assert_eq!(truth.z_pi.dim(), (120, 1));
        let expected_pi = (config.big_r * 3f64.sqrt() / 120.0).sqrt();
        assert!((truth.pi1 - expected_pi).abs() < 1e-15);
    }

    #[test]
    fn replications_are_reproducible_and_distinct() {
        let config = McConfig {
            n: 80,
            g: 8,
            ..McConfig::default()
        };
        let (a, _) = simulate_dataset(&config, 3).unwrap();
        let (b, _) = simulate_dataset(&config, 3).unwrap();
        let (c, _) = simulate_dataset(&config, 4).unwrap();
        assert_eq!(a.y(), b.y());
        assert_eq!(a.z(), b.z());
        assert_ne!(a.y(), c.y());
    }

    #[test]
    fn split_streams_fix_instruments_and_redraw_errors() {
        let config = McConfig {
            n: 80,
            g: 8,
            k: 2,
            ..McConfig::default()
        };
        let (a, _) = simulate_dataset_split(&config, 5, 1).unwrap();
        let (b, _) = simulate_dataset_split(&config, 5, 2).unwrap();
        assert_eq!(a.z(), b.z());
        assert_ne!(a.y(), b.y());
    }

    #[test]
    fn truth_moments_match_monte_carlo_conditional_covariances() {
        // Hold the instruments fixed and average error products over many
        // error draws; the reported conditional moments must match within
        // Monte Carlo error.  Both errors are recoverable exactly:
        // eps = y - x * beta0 and eta = x - pi1 * z[:, 0].
        let config = McConfig {
            n: 12,
            g: 3,
            gamma: 2.0,
            zeta: 0.4,
            rho: 0.5,
            h: 1.0,
            k: 2,
            beta0: 0.7,
            ..McConfig::default()
        };
        let reps = 40_000usize;
        let (first, truth) = simulate_dataset_split(&config, 11, 0).unwrap();
        let blocks = first.blocks().clone();
        let mut sig_hat: Vec<Array2<f64>> = blocks
            .sizes()
            .iter()
            .map(|&m| Array2::zeros((m, m)))
            .collect();
        let mut xi_hat = sig_hat.clone();
        let mut om_hat = sig_hat.clone();
        for rep in 0..reps {
            let (design, tr) = simulate_dataset_split(&config, 11, rep as u64).unwrap();
            for (gi, rows) in blocks.iter() {
                let lo = rows.start;
                for i in rows.clone() {
                    let ei = design.y()[i] - design.x()[(i, 0)] * config.beta0;
                    let hi = design.x()[(i, 0)] - tr.pi1 * design.z()[(i, 0)];
                    for j in rows.clone() {
                        let ej = design.y()[j] - design.x()[(j, 0)] * config.beta0;
                        let hj = design.x()[(j, 0)] - tr.pi1 * design.z()[(j, 0)];
                        sig_hat[gi][(i - lo, j - lo)] += ei * ej;
                        xi_hat[gi][(i - lo, j - lo)] += hi * ej;
                        om_hat[gi][(i - lo, j - lo)] += hi * hj;
                    }
                }
            }
        }
        let scale = 1.0 / reps as f64;
        for gi in 0..blocks.g() {
            for ((est, tru), label) in [
                (&sig_hat[gi], &truth.sigma[gi], "sigma"),
                (&xi_hat[gi], &truth.xi[gi][0], "xi"),
                (&om_hat[gi], &truth.omega[gi][0], "omega"),
            ]
            .map(|(e, t, l)| ((e, t), l))
            {
                for (idx, (&e, &t)) in est.iter().zip(tru.iter()).enumerate() {
                    let diff = (e * scale - t).abs();
                    assert!(
                        diff < 0.06,
                        "{label} cluster {gi} entry {idx}: mc {} vs truth {t}",
                        e * scale
                    );
                }
            }
        }
    }
}
