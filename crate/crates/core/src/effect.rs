//! Point and interval estimators of the overall log-odds-ratio θ.

use std::fmt;

use crate::error::{MetaError, Result};
use crate::numeric::{normal_quantile, t_quantile};
use crate::q_statistics::weighted_mean;
use crate::study_data::EffectSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ThetaMethod {
    IvDl,
    IvReml,
    IvMp,
    IvJ,
    IvKd,
    Ssw,
}

impl ThetaMethod {
    pub const ALL: [ThetaMethod; 6] = [
        ThetaMethod::IvDl,
        ThetaMethod::IvReml,
        ThetaMethod::IvMp,
        ThetaMethod::IvJ,
        ThetaMethod::IvKd,
        ThetaMethod::Ssw,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ThetaMethod::IvDl => "IV_DL",
            ThetaMethod::IvReml => "IV_REML",
            ThetaMethod::IvMp => "IV_MP",
            ThetaMethod::IvJ => "IV_J",
            ThetaMethod::IvKd => "IV_KD",
            ThetaMethod::Ssw => "SSW",
        }
    }
}

impl fmt::Display for ThetaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ThetaIntervalMethod {
    IvDl,
    IvReml,
    IvMp,
    IvJ,
    IvKd,
    HksjDl,
    HksjKd,
    SswKd,
}

impl ThetaIntervalMethod {
    pub const ALL: [ThetaIntervalMethod; 8] = [
        ThetaIntervalMethod::IvDl,
        ThetaIntervalMethod::IvReml,
        ThetaIntervalMethod::IvMp,
        ThetaIntervalMethod::IvJ,
        ThetaIntervalMethod::IvKd,
        ThetaIntervalMethod::HksjDl,
        ThetaIntervalMethod::HksjKd,
        ThetaIntervalMethod::SswKd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ThetaIntervalMethod::IvDl => "IV_DL",
            ThetaIntervalMethod::IvReml => "IV_REML",
            ThetaIntervalMethod::IvMp => "IV_MP",
            ThetaIntervalMethod::IvJ => "IV_J",
            ThetaIntervalMethod::IvKd => "IV_KD",
            ThetaIntervalMethod::HksjDl => "HKSJ_DL",
            ThetaIntervalMethod::HksjKd => "HKSJ_KD",
            ThetaIntervalMethod::SswKd => "SSW_KD",
        }
    }

    /// The IV point-estimate tag sharing this interval's τ² estimator.
    pub fn iv_counterpart(&self) -> Option<ThetaMethod> {
        match self {
            ThetaIntervalMethod::IvDl => Some(ThetaMethod::IvDl),
            ThetaIntervalMethod::IvReml => Some(ThetaMethod::IvReml),
            ThetaIntervalMethod::IvMp => Some(ThetaMethod::IvMp),
            ThetaIntervalMethod::IvJ => Some(ThetaMethod::IvJ),
            ThetaIntervalMethod::IvKd => Some(ThetaMethod::IvKd),
            _ => None,
        }
    }
}

impl fmt::Display for ThetaIntervalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantileFamily {
    Normal,
    /// Student t on `k − 1` degrees of freedom.
    StudentT { df: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaEstimate {
    pub value: f64,
    pub method: ThetaMethod,
    pub tau2_used: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaInterval {
    pub center: f64,
    pub half_width: f64,
    pub method: ThetaIntervalMethod,
    pub family: QuantileFamily,
    /// Zero width because all study estimates coincide.
    pub degenerate: bool,
}

impl ThetaInterval {
    pub fn lower(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width
    }

    pub fn contains(&self, theta: f64) -> bool {
        self.lower() <= theta && theta <= self.upper()
    }
}

fn check_tau2(tau2: f64) -> Result<()> {
    if tau2 >= 0.0 && tau2.is_finite() {
        Ok(())
    } else {
        Err(MetaError::InvalidInput(format!("tau2 must be finite and nonnegative, got {tau2}")))
    }
}

fn re_weights(sample: &EffectSample, tau2: f64) -> Vec<f64> {
    sample.sigma2().iter().map(|v| 1.0 / (v + tau2)).collect()
}

fn t_975(k: usize) -> f64 {
    t_quantile(0.975, (k - 1) as f64)
}

/// Inverse-variance random-effects estimate with weights `1/(σ̂ᵢ² + τ̂²)`.
pub fn iv_point(sample: &EffectSample, tau2: f64, method: ThetaMethod) -> Result<ThetaEstimate> {
    check_tau2(tau2)?;
    let value = weighted_mean(sample.theta(), &re_weights(sample, tau2));
    Ok(ThetaEstimate { value, method, tau2_used: tau2 })
}

/// Normal-quantile interval around [`iv_point`].
pub fn iv_interval(sample: &EffectSample, tau2: f64, method: ThetaIntervalMethod) -> Result<ThetaInterval> {
    check_tau2(tau2)?;
    let w = re_weights(sample, tau2);
    let sw: f64 = w.iter().sum();
    Ok(ThetaInterval {
        center: weighted_mean(sample.theta(), &w),
        half_width: normal_quantile(0.975) / sw.sqrt(),
        method,
        family: QuantileFamily::Normal,
        degenerate: false,
    })
}

/// Mean weighted by effective sample size `ñᵢ`.
pub fn ssw_point(sample: &EffectSample) -> ThetaEstimate {
    ThetaEstimate {
        value: weighted_mean(sample.theta(), sample.n_tilde()),
        method: ThetaMethod::Ssw,
        tau2_used: 0.0,
    }
}

/// Variance of the SSW estimate: `Σñᵢ²(σ̂ᵢ² + τ̂²)/(Σñᵢ)²`.
pub fn ssw_variance(sample: &EffectSample, tau2: f64) -> f64 {
    let n = sample.n_tilde();
    let total: f64 = n.iter().sum();
    let num: f64 = n.iter().zip(sample.sigma2()).map(|(n, v)| n * n * (v + tau2)).sum();
    num / (total * total)
}

/// SSW interval with t quantiles on `k − 1` df; `tau2` is normally the KD estimate.
pub fn ssw_interval(sample: &EffectSample, tau2: f64) -> Result<ThetaInterval> {
    check_tau2(tau2)?;
    Ok(ThetaInterval {
        center: ssw_point(sample).value,
        half_width: t_975(sample.k()) * ssw_variance(sample, tau2).sqrt(),
        method: ThetaIntervalMethod::SswKd,
        family: QuantileFamily::StudentT { df: sample.k() - 1 },
        degenerate: false,
    })
}

/// Plain HKSJ interval (no variance floor).
pub fn hksj_interval(sample: &EffectSample, tau2: f64, method: ThetaIntervalMethod) -> Result<ThetaInterval> {
    check_tau2(tau2)?;
    if !matches!(method, ThetaIntervalMethod::HksjDl | ThetaIntervalMethod::HksjKd) {
        return Err(MetaError::InvalidInput(format!("{method} is not an HKSJ tag")));
    }
    let k = sample.k();
    let theta = sample.theta();
    let family = QuantileFamily::StudentT { df: k - 1 };
    if theta.iter().all(|t| *t == theta[0]) {
        return Ok(ThetaInterval { center: theta[0], half_width: 0.0, method, family, degenerate: true });
    }
    let w = re_weights(sample, tau2);
    let sw: f64 = w.iter().sum();
    let center = weighted_mean(theta, &w);
    let q: f64 = sample.theta().iter().zip(&w).map(|(t, w)| w * (t - center).powi(2)).sum();
    let variance = q / ((k - 1) as f64 * sw);
    Ok(ThetaInterval { center, half_width: t_975(k) * variance.sqrt(), method, family, degenerate: false })
}
