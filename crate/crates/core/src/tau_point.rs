//! Point estimators of the between-study variance τ².

use std::cell::Cell;
use std::fmt;

use crate::error::Result;
use crate::numeric::{brent, golden_section_max};
use crate::q_statistics::{cochran_q, generalized_q, MomentProvider, QMomentModel, QProfile};
use crate::study_data::EffectSample;

/// Upper end of every τ² search bracket.
pub const TAU2_MAX: f64 = 100.0;

/// Absolute tolerance on τ² for the cheap profile roots (MP, PL, QP, BJ, J).
pub(crate) const PROFILE_XTOL: f64 = 1e-10;

/// Absolute tolerance on τ² for roots involving corrected moments.
pub(crate) const KD_XTOL: f64 = 1e-8;

pub(crate) const MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TauMethod {
    DL,
    REML,
    MP,
    J,
    KD,
}

impl TauMethod {
    pub const ALL: [TauMethod; 5] = [TauMethod::DL, TauMethod::REML, TauMethod::MP, TauMethod::J, TauMethod::KD];

    pub fn as_str(&self) -> &'static str {
        match self {
            TauMethod::DL => "DL",
            TauMethod::REML => "REML",
            TauMethod::MP => "MP",
            TauMethod::J => "J",
            TauMethod::KD => "KD",
        }
    }
}

impl fmt::Display for TauMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauEstimate {
    pub value: f64,
    pub method: TauMethod,
    pub converged: bool,
    pub iterations: usize,
    /// The unconstrained solution was negative, so the estimate was set to 0.
    pub truncated_at_zero: bool,
}

impl TauEstimate {
    fn closed_form(method: TauMethod, raw: f64) -> Self {
        Self {
            value: raw.max(0.0),
            method,
            converged: true,
            iterations: 0,
            truncated_at_zero: raw < 0.0,
        }
    }
}

/// How the KD moment equation obtains `E(Q)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KdConfig {
    pub model: QMomentModel,
    /// Evaluate the corrected moments once at `τ² = 0` instead of at every
    /// candidate `τ²` along the profile.
    pub moments_at_null: bool,
}

impl KdConfig {
    pub fn new(model: QMomentModel) -> Self {
        Self { model, moments_at_null: false }
    }
}

/// DerSimonian-Laird moment estimator.
pub fn dl_estimate(sample: &EffectSample) -> TauEstimate {
    let q = cochran_q(sample);
    let (s1, s2) = sample
        .sigma2()
        .iter()
        .fold((0.0, 0.0), |(a, b), v| (a + 1.0 / v, b + 1.0 / (v * v)));
    let df = (sample.k() - 1) as f64;
    TauEstimate::closed_form(TauMethod::DL, (q - df) / (s1 - s2 / s1))
}

/// Generalised-Q moment estimator with fixed weights: solves
/// `E[Q_w](τ²) = Q_w`, which is linear in τ².
pub fn generalized_moment_estimate(sample: &EffectSample, weights: &[f64], method: TauMethod) -> TauEstimate {
    let q = generalized_q(sample, weights);
    let sw: f64 = weights.iter().sum();
    let sw2: f64 = weights.iter().map(|w| w * w).sum();
    let base: f64 = weights
        .iter()
        .zip(sample.sigma2())
        .map(|(w, v)| w * v - w * w * v / sw)
        .sum();
    TauEstimate::closed_form(method, (q - base) / (sw - sw2 / sw))
}

/// Jackson's estimator: generalised-Q moments with weights `1/σ̂ᵢ`.
pub fn jackson_estimate(sample: &EffectSample) -> TauEstimate {
    generalized_moment_estimate(sample, &jackson_weights(sample), TauMethod::J)
}

pub fn jackson_weights(sample: &EffectSample) -> Vec<f64> {
    sample.sigma2().iter().map(|v| 1.0 / v.sqrt()).collect()
}

/// Solves `f(τ²) = 0` on `[0, TAU2_MAX]` for a function that starts positive
/// and decreases; truncates at 0 and reports a missing bracket.
pub(crate) fn profile_root<F: FnMut(f64) -> f64>(method: TauMethod, mut f: F, xtol: f64) -> TauEstimate {
    let f0 = f(0.0);
    if f0 <= 0.0 {
        return TauEstimate {
            value: 0.0,
            method,
            converged: true,
            iterations: 0,
            truncated_at_zero: f0 < 0.0,
        };
    }
    let fmax = f(TAU2_MAX);
    if fmax > 0.0 {
        return TauEstimate { value: TAU2_MAX, method, converged: false, iterations: 0, truncated_at_zero: false };
    }
    let r = brent(f, 0.0, TAU2_MAX, f0, fmax, xtol, MAX_ITER);
    TauEstimate { value: r.x, method, converged: r.converged, iterations: r.iterations, truncated_at_zero: false }
}

/// Solution of `Q(τ²) = g(τ²)` on `[lo, TAU2_MAX]` for a slowly varying,
/// expensive target `g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Matched {
    pub value: f64,
    pub converged: bool,
    /// `Q` stays above `g` up to the cap.
    pub open: bool,
    /// `Q(lo) < g(lo)`: the solution was clamped at `lo`.
    pub clamped: bool,
    pub evaluations: usize,
}

/// `Q⁻¹(y)` restricted to `[lo, TAU2_MAX]`.
fn invert_profile(profile: &QProfile<'_>, y: f64, lo: f64) -> f64 {
    let f_lo = profile.eval(lo) - y;
    if f_lo <= 0.0 {
        return lo;
    }
    let f_hi = profile.eval(TAU2_MAX) - y;
    if f_hi >= 0.0 {
        return TAU2_MAX;
    }
    brent(|t| profile.eval(t) - y, lo, TAU2_MAX, f_lo, f_hi, 1e-3 * PROFILE_XTOL, MAX_ITER).x
}

/// Solves `h(τ²) = Q⁻¹(g(τ²)) − τ² = 0` instead of `Q − g = 0`. The two
/// share their roots, but `h` has slope near −1 whenever `g` varies slowly
/// against `Q`, so few evaluations of `g` are needed.
pub(crate) fn match_profile<G: FnMut(f64) -> f64>(profile: &QProfile<'_>, mut target: G, lo: f64, xtol: f64) -> Matched {
    let g_lo = target(lo);
    let q_lo = profile.eval(lo);
    if q_lo <= g_lo {
        return Matched { value: lo, converged: true, open: false, clamped: q_lo < g_lo, evaluations: 1 };
    }
    let evaluations = Cell::new(1);
    let mut h = |t: f64| {
        evaluations.set(evaluations.get() + 1);
        invert_profile(profile, target(t), lo) - t
    };
    let (mut a, mut fa) = (lo, invert_profile(profile, g_lo, lo) - lo);
    let mut b = (a + 1.5 * fa).min(TAU2_MAX);
    loop {
        // h(TAU2_MAX) ≤ 0 always, so this terminates.
        let fb = h(b);
        if fb <= 0.0 {
            let r = brent(&mut h, a, b, fa, fb, xtol, MAX_ITER);
            let open = r.x >= TAU2_MAX - xtol;
            return Matched {
                value: if open { TAU2_MAX } else { r.x },
                converged: r.converged,
                open,
                clamped: false,
                evaluations: evaluations.get(),
            };
        }
        a = b;
        fa = fb;
        b = (b + 2.0 * fb).min(TAU2_MAX);
    }
}

/// Mandel-Paule: the root of `Q(τ²) = k − 1`.
pub fn mp_estimate(sample: &EffectSample) -> TauEstimate {
    let profile = QProfile::new(sample);
    let df = (sample.k() - 1) as f64;
    profile_root(TauMethod::MP, |t| profile.eval(t) - df, PROFILE_XTOL)
}

/// Restricted log-likelihood with the constant dropped.
pub fn restricted_log_likelihood(sample: &EffectSample, tau2: f64) -> f64 {
    let (q, _) = QProfile::new(sample).eval_with_mean(tau2);
    let (log_v, sw) = sample
        .sigma2()
        .iter()
        .fold((0.0, 0.0), |(l, s), v| (l + (v + tau2).ln(), s + 1.0 / (v + tau2)));
    -0.5 * (log_v + sw.ln() + q)
}

/// Analytic derivative of [`restricted_log_likelihood`] in τ².
pub fn reml_score(sample: &EffectSample, tau2: f64) -> f64 {
    let (_, mu) = QProfile::new(sample).eval_with_mean(tau2);
    let (mut sw, mut sw2, mut swr) = (0.0, 0.0, 0.0);
    for (t, v) in sample.theta().iter().zip(sample.sigma2()) {
        let w = 1.0 / (v + tau2);
        sw += w;
        sw2 += w * w;
        swr += w * w * (t - mu).powi(2);
    }
    0.5 * (swr - sw + sw2 / sw)
}

fn reml_information(sample: &EffectSample, tau2: f64) -> f64 {
    let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
    for v in sample.sigma2() {
        let w = 1.0 / (v + tau2);
        s1 += w;
        s2 += w * w;
        s3 += w * w * w;
    }
    0.5 * (s2 - 2.0 * s3 / s1 + (s2 / s1).powi(2))
}

/// REML by Fisher scoring from the DL value, projected onto `τ² ≥ 0`;
/// golden-section search on `[0, TAU2_MAX]` if scoring stalls.
pub fn reml_estimate(sample: &EffectSample) -> TauEstimate {
    let mut tau2 = dl_estimate(sample).value.min(TAU2_MAX);
    for it in 1..=MAX_ITER {
        let score = reml_score(sample, tau2);
        let next = (tau2 + score / reml_information(sample, tau2)).clamp(0.0, TAU2_MAX);
        let step = (next - tau2).abs();
        tau2 = next;
        if step < 1e-12 * tau2.max(1.0) || (tau2 == 0.0 && reml_score(sample, 0.0) <= 0.0) {
            return TauEstimate {
                value: tau2,
                method: TauMethod::REML,
                converged: true,
                iterations: it,
                truncated_at_zero: tau2 == 0.0 && reml_score(sample, 0.0) < 0.0,
            };
        }
    }
    let r = golden_section_max(|t| restricted_log_likelihood(sample, t), 0.0, TAU2_MAX, 1e-10, 1_000);
    let at_zero = restricted_log_likelihood(sample, 0.0) >= restricted_log_likelihood(sample, r.x);
    let value = if at_zero { 0.0 } else { r.x };
    TauEstimate {
        value,
        method: TauMethod::REML,
        converged: r.converged,
        iterations: MAX_ITER + r.iterations,
        truncated_at_zero: value == 0.0 && reml_score(sample, 0.0) < 0.0,
    }
}

/// KD moment estimator: the root of `Q(τ²) = E(Q)` with corrected moments.
pub fn kd_estimate(sample: &EffectSample, cfg: &KdConfig) -> Result<TauEstimate> {
    let provider = MomentProvider::new(sample, &cfg.model)?;
    let profile = QProfile::new(sample);
    let null_mean = cfg.moments_at_null.then(|| provider.mean(0.0));
    let m = match_profile(&profile, |t| null_mean.unwrap_or_else(|| provider.mean(t)), 0.0, KD_XTOL);
    Ok(TauEstimate {
        value: m.value,
        method: TauMethod::KD,
        converged: m.converged && !m.open,
        iterations: m.evaluations,
        truncated_at_zero: m.clamped,
    })
}
