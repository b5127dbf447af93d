//! CDF of a positively weighted sum of independent χ²₁ variables.
//!
//! Ruben's expansion in central chi-square CDFs with `β = min λ`: every
//! coefficient is nonnegative and they sum to one, so the mass not yet
//! summed, times the next (smaller) chi-square CDF, bounds the truncation
//! error.

use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{MetaError, Result};

const MAX_TERMS: usize = 100_000;

/// `P(Σ λᵢ χ²₁ ≤ q)` to absolute accuracy `tol`.
pub fn weighted_chisq_mixture_cdf(lambdas: &[f64], q: f64, tol: f64) -> Result<f64> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(MetaError::InvalidInput("mixture weights must be positive".into()));
    }
    if !(tol > 0.0) {
        return Err(MetaError::InvalidInput("tolerance must be positive".into()));
    }
    if q <= 0.0 {
        return Ok(0.0);
    }
    let beta = lambdas.iter().cloned().fold(f64::INFINITY, f64::min);
    let m = lambdas.len() as f64;
    let x = q / beta;
    let gammas: Vec<f64> = lambdas.iter().map(|l| 1.0 - beta / l).filter(|g| *g > 0.0).collect();

    let log_a0: f64 = lambdas.iter().map(|l| 0.5 * (beta / l).ln()).sum();
    let mut coeffs = vec![log_a0.exp()];
    let mut g = Vec::<f64>::new();
    let mut powers = gammas.clone();

    // F_{m+2k}(x) by downward recurrence from F_m.
    let mut df = m;
    let mut cdf = gamma_lr(0.5 * df, 0.5 * x);
    let mut term = (-0.5 * x + 0.5 * df * (0.5 * x).ln() - ln_gamma(0.5 * df + 1.0)).exp();

    let mut total = coeffs[0] * cdf;
    let mut mass = coeffs[0];
    for k in 1..=MAX_TERMS {
        cdf = (cdf - term).max(0.0);
        term *= 0.5 * x / (0.5 * df + 1.0);
        df += 2.0;
        if (1.0 - mass).max(0.0) * cdf < tol {
            return Ok(total.clamp(0.0, 1.0));
        }
        g.push(0.5 * powers.iter().sum::<f64>());
        for (p, gm) in powers.iter_mut().zip(&gammas) {
            *p *= gm;
        }
        let a_k = (0..k).map(|r| g[k - r - 1] * coeffs[r]).sum::<f64>() / k as f64;
        coeffs.push(a_k);
        total += a_k * cdf;
        mass += a_k;
    }
    Err(MetaError::NonConvergence { what: "chi-square mixture series", iterations: MAX_TERMS })
}
