//! Confidence intervals for τ².
//!
//! Every interval inverts a statistic that moves monotonically with τ²:
//! the Q-profile against chi-square quantiles (QP), the generalised Q against
//! its exact normal-theory mixture distribution (BJ, J), the restricted
//! likelihood ratio (PL), and the Q-profile against quantiles of the gamma law
//! matched to corrected moments (KD). Upper endpoints that do not close below
//! [`TAU2_MAX`] are capped there and flagged `open_upper`.

use std::fmt;

use crate::error::{MetaError, Result};
use crate::numeric::{brent, chi2_quantile};
use crate::q_statistics::{
    generalized_q, mixture_weights, weighted_chisq_mixture_cdf, GammaFit, MomentProvider, QProfile,
};
use crate::study_data::EffectSample;
use crate::tau_point::{
    jackson_weights, match_profile, reml_estimate, restricted_log_likelihood, KdConfig, KD_XTOL, MAX_ITER, PROFILE_XTOL,
    TAU2_MAX,
};

/// Accuracy requested from the mixture CDF while inverting it.
const MIXTURE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TauIntervalMethod {
    QP,
    BJ,
    J,
    PL,
    KD,
}

impl TauIntervalMethod {
    pub const ALL: [TauIntervalMethod; 5] = [
        TauIntervalMethod::QP,
        TauIntervalMethod::BJ,
        TauIntervalMethod::J,
        TauIntervalMethod::PL,
        TauIntervalMethod::KD,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TauIntervalMethod::QP => "QP",
            TauIntervalMethod::BJ => "BJ",
            TauIntervalMethod::J => "J",
            TauIntervalMethod::PL => "PL",
            TauIntervalMethod::KD => "KD",
        }
    }
}

impl fmt::Display for TauIntervalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauInterval {
    pub lower: f64,
    pub upper: f64,
    pub method: TauIntervalMethod,
    pub level: f64,
    /// The upper endpoint hit [`TAU2_MAX`].
    pub open_upper: bool,
}

impl TauInterval {
    /// Coverage check; a capped interval covers everything up to the cap.
    pub fn covers(&self, tau2: f64) -> bool {
        tau2 >= self.lower && (tau2 <= self.upper || (self.open_upper && tau2 <= TAU2_MAX))
    }
}

/// Endpoint of `f(τ²) = 0` for `f` decreasing from a positive value.
struct Endpoint {
    value: f64,
    open: bool,
    converged: bool,
}

fn decreasing_root<F: FnMut(f64) -> f64>(mut f: F, lo: f64, xtol: f64) -> Endpoint {
    let f_lo = f(lo);
    if f_lo <= 0.0 {
        return Endpoint { value: lo, open: false, converged: true };
    }
    let f_hi = f(TAU2_MAX);
    if f_hi > 0.0 {
        return Endpoint { value: TAU2_MAX, open: true, converged: true };
    }
    let r = brent(f, lo, TAU2_MAX, f_lo, f_hi, xtol, MAX_ITER);
    Endpoint { value: r.x, open: false, converged: r.converged }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(MetaError::InvalidInput(format!("confidence level {level} outside (0, 1)")))
    }
}

fn assemble(
    method: TauIntervalMethod,
    level: f64,
    lower: Endpoint,
    upper: Endpoint,
    what: &'static str,
) -> Result<TauInterval> {
    if !(lower.converged && upper.converged) {
        return Err(MetaError::NonConvergence { what, iterations: MAX_ITER });
    }
    Ok(TauInterval {
        lower: lower.value.min(upper.value),
        upper: upper.value,
        method,
        level,
        open_upper: upper.open,
    })
}

/// Q-profile interval: `Q(τ²)` against the χ²ₖ₋₁ quantiles.
pub fn qp_interval(sample: &EffectSample, level: f64) -> Result<TauInterval> {
    check_level(level)?;
    let profile = QProfile::new(sample);
    let df = (sample.k() - 1) as f64;
    let hi_q = chi2_quantile(0.5 * (1.0 + level), df);
    let lo_q = chi2_quantile(0.5 * (1.0 - level), df);
    let lower = decreasing_root(|t| profile.eval(t) - hi_q, 0.0, PROFILE_XTOL);
    let upper = decreasing_root(|t| profile.eval(t) - lo_q, lower.value, PROFILE_XTOL);
    assemble(TauIntervalMethod::QP, level, lower, upper, "Q-profile interval")
}

/// Generalised-Q interval with fixed weights, inverting the exact mixture
/// distribution of `Q_w` under the normal random-effects model.
pub fn generalized_q_interval(
    sample: &EffectSample,
    weights: &[f64],
    method: TauIntervalMethod,
    level: f64,
) -> Result<TauInterval> {
    check_level(level)?;
    let q_obs = generalized_q(sample, weights);
    let mut failure = None;
    // P(Q_w ≥ q_obs; τ²), non-decreasing in τ².
    let mut survival = |t: f64| -> f64 {
        let lambdas = mixture_weights(sample.sigma2(), weights, t);
        match weighted_chisq_mixture_cdf(&lambdas, q_obs, MIXTURE_TOL) {
            Ok(p) => 1.0 - p,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let lower_p = 0.5 * (1.0 - level);
    let upper_p = 0.5 * (1.0 + level);
    let lower = decreasing_root(|t| lower_p - survival(t), 0.0, PROFILE_XTOL);
    let upper = decreasing_root(|t| upper_p - survival(t), lower.value, PROFILE_XTOL);
    if let Some(e) = failure {
        return Err(e);
    }
    assemble(method, level, lower, upper, "generalised Q interval")
}

/// Biggerstaff-Jackson interval: inverse-variance weights `1/σ̂ᵢ²`.
pub fn bj_interval(sample: &EffectSample, level: f64) -> Result<TauInterval> {
    let w: Vec<f64> = sample.sigma2().iter().map(|v| 1.0 / v).collect();
    generalized_q_interval(sample, &w, TauIntervalMethod::BJ, level)
}

/// Jackson interval: weights `1/σ̂ᵢ`.
pub fn jackson_interval(sample: &EffectSample, level: f64) -> Result<TauInterval> {
    generalized_q_interval(sample, &jackson_weights(sample), TauIntervalMethod::J, level)
}

/// Profile-likelihood interval around the REML estimate.
pub fn pl_interval(sample: &EffectSample, level: f64) -> Result<TauInterval> {
    check_level(level)?;
    let reml = reml_estimate(sample).value;
    let l_max = restricted_log_likelihood(sample, reml);
    let crit = chi2_quantile(level, 1.0);
    let inside = |t: f64| crit - 2.0 * (l_max - restricted_log_likelihood(sample, t));
    let lower = if reml == 0.0 || inside(0.0) >= 0.0 {
        Endpoint { value: 0.0, open: false, converged: true }
    } else {
        let (f0, f1) = (inside(0.0), inside(reml));
        let r = brent(inside, 0.0, reml, f0, f1, PROFILE_XTOL, MAX_ITER);
        Endpoint { value: r.x, open: false, converged: r.converged }
    };
    let upper = decreasing_root(inside, reml, PROFILE_XTOL);
    assemble(TauIntervalMethod::PL, level, lower, upper, "profile-likelihood interval")
}

/// KD interval: the Q-profile against quantiles of the gamma law matched to
/// the corrected moments of `Q(τ²)` at the same τ².
pub fn kd_interval(sample: &EffectSample, cfg: &KdConfig, level: f64) -> Result<TauInterval> {
    check_level(level)?;
    let provider = MomentProvider::new(sample, &cfg.model)?;
    let profile = QProfile::new(sample);
    let null_fit = cfg.moments_at_null.then(|| {
        let (m, v) = provider.moments(0.0);
        GammaFit::from_moments(m, v)
    });
    let fit = |t: f64| {
        null_fit.unwrap_or_else(|| {
            let (m, v) = provider.moments(t);
            GammaFit::from_moments(m, v)
        })
    };
    let (hi_p, lo_p) = (0.5 * (1.0 + level), 0.5 * (1.0 - level));
    let lower = match_profile(&profile, |t| fit(t).quantile(hi_p), 0.0, KD_XTOL);
    let upper = match_profile(&profile, |t| fit(t).quantile(lo_p), lower.value, KD_XTOL);
    let lower = Endpoint { value: lower.value, open: lower.open, converged: lower.converged };
    let upper = Endpoint { value: upper.value, open: upper.open, converged: upper.converged };
    assemble(TauIntervalMethod::KD, level, lower, upper, "KD interval")
}

/// Sensitivity variant of [`kd_interval`] with the gamma law frozen at the
/// moments evaluated at `tau2_hat` (normally the KD point estimate).
pub fn kd_interval_frozen(sample: &EffectSample, cfg: &KdConfig, tau2_hat: f64, level: f64) -> Result<TauInterval> {
    check_level(level)?;
    let provider = MomentProvider::new(sample, &cfg.model)?;
    let (m, v) = provider.moments(tau2_hat);
    let g = GammaFit::from_moments(m, v);
    let profile = QProfile::new(sample);
    let (hi_q, lo_q) = (g.quantile(0.5 * (1.0 + level)), g.quantile(0.5 * (1.0 - level)));
    let lower = decreasing_root(|t| profile.eval(t) - hi_q, 0.0, PROFILE_XTOL);
    let upper = decreasing_root(|t| profile.eval(t) - lo_q, lower.value, PROFILE_XTOL);
    assemble(TauIntervalMethod::KD, level, lower, upper, "KD interval")
}
