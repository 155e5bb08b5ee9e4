//! First-stage instrument-strength diagnostics under clustering.
//!
//! These are descriptive statistics, not pretests: the inference in this
//! crate stays valid regardless of instrument strength. The three flavors
//! are the classical homoskedastic (Cragg-Donald style) F, a cluster-robust
//! F built from the covariance of the summed moments `Z'X/sqrt(n)`, and the
//! effective F that rescales the projection quadratic by that covariance's
//! average leverage.

use ndarray::prelude::*;

use crate::design::ClusteredDesign;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, chol_solve, chol_solve_mat, jacobi_eigh, sym_inverse_sqrt, PivotedQr};

/// Which first-stage F-statistic to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FFlavor {
    /// Minimum eigenvalue of the first-stage F matrix with the
    /// homoskedastic residual covariance (any number of endogenous
    /// regressors).
    Homoskedastic,
    /// Quadratic form in `Z'X` weighted by the inverse cluster-robust
    /// covariance, scaled by `1/(nk)` (single endogenous regressor).
    Robust,
    /// Projection quadratic over the trace of the cluster-robust
    /// covariance against `Z'Z/n` (single endogenous regressor).
    Effective,
}

/// A first-stage strength diagnostic.
#[derive(Debug, Clone)]
pub struct FirstStageReport {
    pub flavor: FFlavor,
    /// The statistic; `f64::INFINITY` when the first-stage residuals
    /// vanish (see `infinite`).
    pub value: f64,
    /// Set when the first-stage residual covariance degenerated to zero
    /// (X exactly in the instrument span) and the statistic diverges.
    pub infinite: bool,
    pub k: usize,
    pub p: usize,
    pub g: usize,
}

/// Compute a first-stage F-statistic.
///
/// All flavors regress `X` on `Z` to obtain residuals `eta = M_Z X`. The
/// robust and effective flavors use the cluster-robust covariance
/// `W2 = sum_g Z_g' eta_g eta_g' Z_g / n` and require a single endogenous
/// regressor.
pub fn first_stage_f(design: &ClusteredDesign, flavor: FFlavor) -> Result<FirstStageReport> {
    let n = design.n();
    let p = design.p();
    let k = design.k();
    let x = design.x();
    let z = design.z();

    let qr = PivotedQr::factor(&z.view());
    if !qr.is_full_column_rank() {
        return Err(Error::RankDeficient {
            observed: qr.rank(),
            expected: k,
        });
    }
    let q = qr.thin_q();
    let qx = q.t().dot(x); // k x p
    let x_pz_x = qx.t().dot(&qx); // p x p
    let eta = x - &q.dot(&qx); // n x p first-stage residuals

    let report = |value: f64, infinite: bool| FirstStageReport {
        flavor,
        value,
        infinite,
        k,
        p,
        g: design.g(),
    };

    match flavor {
        FFlavor::Homoskedastic => {
            let dof = (n - k) as f64;
            let sigma = eta.t().dot(&eta) / dof;
            // Residual covariance that is zero relative to the projected
            // signal means X sits in the instrument span: F diverges.
            let scale = x_pz_x.diag().sum() / dof;
            if sigma.diag().sum() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
                return Ok(report(f64::INFINITY, true));
            }
            let isqrt = match sym_inverse_sqrt(&sigma.view(), 1e-12) {
                Some(m) => m,
                // Gram matrices are PSD; no positive eigenvalue at all means
                // the residuals vanished.
                None => return Ok(report(f64::INFINITY, true)),
            };
            let m = isqrt.t().dot(&x_pz_x).dot(&isqrt);
            let (vals, _) = jacobi_eigh(&m.view());
            Ok(report(vals[0], false))
        }
        FFlavor::Robust | FFlavor::Effective => {
            if p != 1 {
                return Err(Error::UnsupportedDimension(p));
            }
            // Same degeneracy screen as the homoskedastic flavor: residual
            // energy at rounding level relative to the explained quadratic
            // means X sits in the instrument span, and W2 would only hold
            // noise.
            let eta_ss = eta.column(0).dot(&eta.column(0));
            let explained = x_pz_x[(0, 0)];
            if explained > 0.0 && eta_ss <= 1e-14 * explained {
                return Ok(report(f64::INFINITY, true));
            }
            let nf = n as f64;
            let mut w2 = Array2::<f64>::zeros((k, k));
            for (_, r) in design.blocks().iter() {
                let zge: Array1<f64> = z
                    .slice(s![r.clone(), ..])
                    .t()
                    .dot(&eta.slice(s![r, 0])); // k-vector Z_g' eta_g
                for i in 0..k {
                    for j in 0..k {
                        w2[(i, j)] += zge[i] * zge[j];
                    }
                }
            }
            w2 /= nf;
            if flavor == FFlavor::Robust {
                let l = cholesky(&w2.view()).ok_or(Error::SingularW2)?;
                let zx = z.t().dot(&x.column(0));
                let sol = chol_solve(&l.view(), &zx.view());
                Ok(report(zx.dot(&sol) / (nf * k as f64), false))
            } else {
                // tr(W2 (Z'Z/n)^{-1}) through the Cholesky factor of Z'Z/n.
                let zz = z.t().dot(z) / nf;
                let l = cholesky(&zz.view()).ok_or(Error::RankDeficient {
                    observed: 0,
                    expected: k,
                })?;
                let sol = chol_solve_mat(&l.view(), &w2.view());
                let denom = sol.diag().sum();
                if denom <= 0.0 {
                    return Ok(report(f64::INFINITY, true));
                }
                Ok(report(x_pz_x[(0, 0)] / denom, false))
            }
        }
    }
}
