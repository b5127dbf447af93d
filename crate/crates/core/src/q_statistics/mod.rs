//! Generalised Cochran Q statistics and their distributions.
//!
//! The profile `Q(τ²)` is formed from the estimated study effects (the data
//! carry no true per-study effects), re-centred at the weighted mean for
//! every `τ²`.

mod mixture;
mod moments;

use nalgebra::{DMatrix, SymmetricEigen};

pub use mixture::weighted_chisq_mixture_cdf;
pub use moments::{corrected_q_moments, design_q_moments, MomentProvider, StudyDesign, QMomentModel, DEFAULT_BOOTSTRAP_RESAMPLES};

use crate::numeric::gamma_quantile;
use crate::study_data::EffectSample;

/// Weighted mean `Σ wᵢθᵢ / Σ wᵢ`.
pub fn weighted_mean(theta: &[f64], weights: &[f64]) -> f64 {
    let (num, den) = theta
        .iter()
        .zip(weights)
        .fold((0.0, 0.0), |(n, d), (t, w)| (n + w * t, d + w));
    num / den
}

/// `Σ wᵢ(θ̂ᵢ − θ̄_w)²` for arbitrary positive weights.
pub fn generalized_q(sample: &EffectSample, weights: &[f64]) -> f64 {
    q_form(sample.theta(), weights)
}

pub(crate) fn q_form(theta: &[f64], weights: &[f64]) -> f64 {
    debug_assert_eq!(theta.len(), weights.len());
    let mean = weighted_mean(theta, weights);
    theta.iter().zip(weights).map(|(t, w)| w * (t - mean).powi(2)).sum()
}

/// Cochran's Q: inverse-variance weights at `τ² = 0`.
pub fn cochran_q(sample: &EffectSample) -> f64 {
    q_profile_eval(sample, 0.0)
}

/// `Q(τ²)` with weights `1/(σ̂ᵢ² + τ²)`.
pub fn q_profile_eval(sample: &EffectSample, tau2: f64) -> f64 {
    QProfile::new(sample).eval(tau2)
}

/// The map `τ² ↦ Q(τ²)` over one sample.
#[derive(Debug, Clone, Copy)]
pub struct QProfile<'a> {
    sample: &'a EffectSample,
}

impl<'a> QProfile<'a> {
    pub fn new(sample: &'a EffectSample) -> Self {
        Self { sample }
    }

    pub fn sample(&self) -> &'a EffectSample {
        self.sample
    }

    pub fn eval(&self, tau2: f64) -> f64 {
        let (q, _) = self.eval_with_mean(tau2);
        q
    }

    /// `Q(τ²)` together with the weighted mean it was centred at.
    pub fn eval_with_mean(&self, tau2: f64) -> (f64, f64) {
        let theta = self.sample.theta();
        let sigma2 = self.sample.sigma2();
        let (mut sw, mut swt) = (0.0, 0.0);
        for (t, v) in theta.iter().zip(sigma2) {
            let w = 1.0 / (v + tau2);
            sw += w;
            swt += w * t;
        }
        let mean = swt / sw;
        let q = theta
            .iter()
            .zip(sigma2)
            .map(|(t, v)| (t - mean).powi(2) / (v + tau2))
            .sum();
        (q, mean)
    }
}

/// Gamma law matched to a mean and a variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaFit {
    pub shape: f64,
    pub scale: f64,
}

impl GammaFit {
    pub fn from_moments(mean: f64, variance: f64) -> Self {
        Self { shape: mean * mean / variance, scale: variance / mean }
    }

    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn variance(&self) -> f64 {
        self.shape * self.scale * self.scale
    }

    pub fn quantile(&self, p: f64) -> f64 {
        gamma_quantile(p, self.shape, self.scale)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        crate::numeric::gamma_cdf(x, self.shape, self.scale)
    }
}

/// Expected value of `Q_w` under the normal random-effects model at `τ²`:
/// `Σwᵢvᵢ − Σwᵢ²vᵢ/Σwᵢ` with `vᵢ = σ̂ᵢ² + τ²`.
pub fn expected_generalized_q(sigma2: &[f64], weights: &[f64], tau2: f64) -> f64 {
    let sw: f64 = weights.iter().sum();
    let (mut a, mut b) = (0.0, 0.0);
    for (w, s) in weights.iter().zip(sigma2) {
        let v = s + tau2;
        a += w * v;
        b += w * w * v;
    }
    a - b / sw
}

/// Eigenvalues of `A·V(τ²)`, the weights of the chi-square mixture followed
/// by `Q_w` under the normal random-effects model. `A = W − wwᵀ/Σw`,
/// `V = diag(σ̂ᵢ² + τ²)`. Numerical zeros (below `1e-12·max`) are dropped;
/// the result is sorted in decreasing order.
pub fn rem_mixture_weights(sample: &EffectSample, fixed_weights: &[f64], tau2: f64) -> Vec<f64> {
    mixture_weights(sample.sigma2(), fixed_weights, tau2)
}

pub fn mixture_weights(sigma2: &[f64], w: &[f64], tau2: f64) -> Vec<f64> {
    let k = w.len();
    let sw: f64 = w.iter().sum();
    let root_v: Vec<f64> = sigma2.iter().map(|s| (s + tau2).sqrt()).collect();
    // Symmetric V^{1/2} A V^{1/2} shares the spectrum of A V.
    let m = DMatrix::from_fn(k, k, |i, j| {
        let a = if i == j { w[i] } else { 0.0 } - w[i] * w[j] / sw;
        root_v[i] * a * root_v[j]
    });
    let eig = SymmetricEigen::new(m).eigenvalues;
    let max = eig.iter().cloned().fold(0.0, f64::max);
    let mut out: Vec<f64> = eig.iter().cloned().filter(|&l| l > 1e-12 * max).collect();
    out.sort_by(|a, b| b.total_cmp(a));
    out
}
