//! Chi-square and standard-normal distribution functions.
//!
//! The inference layer needs chi-square quantiles accurate to well below
//! 1e-6 for degrees of freedom from 1 up to 10^6, which is tighter than
//! several off-the-shelf implementations deliver. The routines here follow
//! the classical recipes: a Lanczos log-gamma, the regularized incomplete
//! gamma function via its series and continued-fraction expansions, and
//! quantiles by Newton iteration from a Wilson-Hilferty starting point with
//! a bisection safeguard. Accuracy is pinned down by tests against frozen
//! reference values.

// Coefficient tables are kept digit-for-digit as published even where that
// exceeds f64 precision.
#![allow(clippy::excessive_precision)]

/// Natural log of the gamma function (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula keeps the approximation on x >= 0.5.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, c) in COEF.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const GAMMA_EPS: f64 = 1e-16;
// The series and continued fraction need O(sqrt(a)) terms near x = a; the
// cap covers a up to ~10^6 degrees of freedom with a wide margin.
const GAMMA_MAX_ITER: usize = 200_000;

/// Regularized lower incomplete gamma P(a, x) by its power series
/// (preferred for x < a + 1).
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    (sum.ln() + log_prefix).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by modified Lentz continued
/// fraction (preferred for x >= a + 1).
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    (h.ln() + log_prefix).exp()
}

/// Regularized lower incomplete gamma function P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_p_series(a, x)
    } else {
        1.0 - gamma_q_cf(a, x)
    }
}

/// Regularized upper incomplete gamma function Q(a, x) = 1 - P(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

/// Chi-square CDF with `k` degrees of freedom (k may be non-integral).
pub fn chi2_cdf(k: f64, x: f64) -> f64 {
    gamma_p(0.5 * k, 0.5 * x)
}

/// Chi-square survival function (upper tail), accurate far into the tail.
pub fn chi2_sf(k: f64, x: f64) -> f64 {
    gamma_q(0.5 * k, 0.5 * x)
}

/// Chi-square quantile: the x with `chi2_cdf(k, x) = p`.
///
/// Newton iteration on the CDF from a Wilson-Hilferty start, with an
/// expanding bisection bracket as safeguard. Relative accuracy is ~1e-12
/// across k from 1 to 10^6.
pub fn chi2_quantile(k: f64, p: f64) -> f64 {
    assert!(k > 0.0, "degrees of freedom must be positive");
    assert!((0.0..1.0).contains(&p), "probability must lie in [0, 1)");
    if p == 0.0 {
        return 0.0;
    }

    // Wilson-Hilferty cube approximation.
    let z = normal_quantile(p);
    let c = 2.0 / (9.0 * k);
    let start = k * (1.0 - c + z * c.sqrt()).powi(3);
    let mut x = if start.is_finite() && start > 0.0 { start } else { k };

    // Establish a bracket [lo, hi] with cdf(lo) <= p <= cdf(hi).
    let mut lo = x;
    let mut hi = x;
    while chi2_cdf(k, lo) > p && lo > f64::MIN_POSITIVE {
        lo *= 0.5;
    }
    while chi2_cdf(k, hi) < p {
        hi *= 2.0;
    }
    x = x.clamp(lo, hi);

    let a = 0.5 * k;
    let ln_norm = -a * std::f64::consts::LN_2 - ln_gamma(a);
    for _ in 0..100 {
        let f = chi2_cdf(k, x) - p;
        if f > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        // log density of the chi-square at x.
        let ln_pdf = ln_norm + (a - 1.0) * x.ln() - 0.5 * x;
        let pdf = ln_pdf.exp();
        let mut next = if pdf > 0.0 { x - f / pdf } else { x };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-14 * x.abs() {
            x = next;
            break;
        }
        x = next;
    }
    x
}

/// Standard normal CDF, accurate in both tails (computed through the
/// incomplete gamma function rather than a truncated polynomial).
pub fn normal_cdf(x: f64) -> f64 {
    let half_sq = 0.5 * x * x;
    if x >= 0.0 {
        // 0.5 (1 + erf(x / sqrt 2)) with erf via P(1/2, x^2/2).
        0.5 + 0.5 * gamma_p(0.5, half_sq)
    } else {
        0.5 * gamma_q(0.5, half_sq)
    }
}

/// Standard normal survival function.
pub fn normal_sf(x: f64) -> f64 {
    normal_cdf(-x)
}

/// Standard normal quantile (Acklam's rational approximation, polished by
/// one Halley step against `normal_cdf`). Absolute error well below 1e-14
/// over (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;

    let x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // One Halley refinement against the accurate CDF.
    let e = normal_cdf(x) - p;
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if pdf > 0.0 {
        let u = e / pdf;
        x - u / (1.0 + 0.5 * x * u)
    } else {
        x
    }
}
