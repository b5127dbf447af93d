//! Moments of `Q(τ²)` for log-odds-ratios.
//!
//! The corrected provider works from the binomial model behind each study:
//! for every retained study it enumerates the joint distribution of the
//! estimated log-odds-ratio and its inverse-variance weight (conditional on
//! the table not being a double zero), with the control-arm probability and
//! the common effect replaced by their estimates and the study effect mixed
//! over `N(θ, τ²)` by Gauss-Hermite quadrature. Writing `ŵᵢ = wᵢ + Δᵢ`,
//! `Q = Σ ŵᵢεᵢ² − (Σ ŵᵢεᵢ)² / (W + ΣΔᵢ)`, and expanding the reciprocal to
//! second order in `ΣΔᵢ/W` leaves only joint moments of sums of independent
//! per-study terms, which multiply through their generating functions. The
//! neglected terms are `O(n^{-3/2})`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::error::{MetaError, Result};
use crate::numeric::{binomial_pmf_window, gauss_hermite_normal};
use crate::study_data::{Adjustment, EffectSample, StudyTable, VarianceDenominator, ZeroCellPolicy};

use super::{q_form, QProfile};

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 2_000;

/// Relative mass below which binomial support points, and joint outcomes,
/// are ignored.
const PMF_CUT: f64 = 1e-11;

/// Source of the mean and variance of `Q(τ²)`.
#[derive(Debug, Clone, PartialEq)]
pub enum QMomentModel {
    /// `(k − 1, 2(k − 1))`.
    NullChiSquare,
    /// Small-sample corrected moments from the binomial model.
    KdCorrected,
    /// Moments of `Q` over simulated meta-analyses generated at the fitted
    /// common effect and the observed control proportions and arm sizes.
    BootstrapNull { resamples: usize, seed: u64 },
}

impl Default for QMomentModel {
    fn default() -> Self {
        QMomentModel::KdCorrected
    }
}

/// Mean and variance of `Q(τ²)` for one sample under `model`.
pub fn corrected_q_moments(sample: &EffectSample, tau2: f64, model: &QMomentModel) -> Result<(f64, f64)> {
    Ok(MomentProvider::new(sample, model)?.moments(tau2))
}

/// Per-sample state reused across many `τ²` evaluations.
#[derive(Debug, Clone)]
pub struct MomentProvider<'a> {
    sample: &'a EffectSample,
    engine: Engine,
}

#[derive(Debug, Clone)]
enum Engine {
    Null,
    Corrected(Vec<StudyModel>),
    Bootstrap { resamples: usize, seed: u64, studies: Vec<StudyModel> },
}

impl<'a> MomentProvider<'a> {
    pub fn new(sample: &'a EffectSample, model: &QMomentModel) -> Result<Self> {
        let engine = match model {
            QMomentModel::NullChiSquare => Engine::Null,
            QMomentModel::KdCorrected => Engine::Corrected(study_models(sample)?),
            QMomentModel::BootstrapNull { resamples, seed } => {
                if *resamples < 100 {
                    return Err(MetaError::BootstrapFailure(*resamples));
                }
                Engine::Bootstrap { resamples: *resamples, seed: *seed, studies: study_models(sample)? }
            }
        };
        Ok(Self { sample, engine })
    }

    /// Corrected mean of `Q(τ²)` only.
    pub fn mean(&self, tau2: f64) -> f64 {
        match &self.engine {
            Engine::Null => (self.sample.k() - 1) as f64,
            Engine::Corrected(studies) => self.expansion(studies, tau2, Order::Mean).0,
            Engine::Bootstrap { .. } => self.moments(tau2).0,
        }
    }

    /// Corrected `(mean, variance)` of `Q(τ²)`.
    pub fn moments(&self, tau2: f64) -> (f64, f64) {
        let df = (self.sample.k() - 1) as f64;
        match &self.engine {
            Engine::Null => (df, 2.0 * df),
            Engine::Corrected(studies) => {
                let (mean, var) = self.expansion(studies, tau2, Order::Variance);
                // Guard against a breakdown of the expansion in extreme designs.
                let var = if var > 0.0 && var.is_finite() { var } else { 2.0 * mean };
                (mean, var)
            }
            Engine::Bootstrap { resamples, seed, studies } => bootstrap(self.sample, studies, tau2, *resamples, *seed),
        }
    }

    fn expansion(&self, studies: &[StudyModel], tau2: f64, order: Order) -> (f64, f64) {
        let (_, theta0) = QProfile::new(self.sample).eval_with_mean(tau2);
        expansion(studies, theta0, tau2, order)
    }
}

/// Arm sizes and true control-arm event probability of one study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyDesign {
    pub n_t: u32,
    pub n_c: u32,
    pub p_c: f64,
}

/// Corrected `(mean, variance)` of Cochran's `Q` when the parameters are
/// known: study effects `N(theta, tau2)`, tables conditioned on not being
/// double zeros, and effects built under `policy`.
pub fn design_q_moments(design: &[StudyDesign], policy: ZeroCellPolicy, theta: f64, tau2: f64) -> Result<(f64, f64)> {
    if design.len() < 2 {
        return Err(MetaError::TooFewStudies { k: design.len() });
    }
    let adjustment = Adjustment::new(policy);
    let mut studies = Vec::with_capacity(design.len());
    for d in design {
        if !(d.p_c > 0.0 && d.p_c < 1.0) {
            return Err(MetaError::Domain(d.p_c));
        }
        if d.n_t == 0 || d.n_c == 0 {
            return Err(MetaError::InvalidInput("empty study arm".into()));
        }
        studies.push(StudyModel::new(d.n_t, d.n_c, d.p_c, adjustment));
    }
    Ok(expansion(&studies, theta, tau2, Order::Variance))
}

fn expansion(studies: &[StudyModel], theta0: f64, tau2: f64, order: Order) -> (f64, f64) {
    let dims = order.dims();
    let mut total = Poly3::one(dims);
    let mut w_sum = 0.0;
    let mut scratch = Vec::new();
    for s in studies {
        let (c, mu) = s.moment_poly(theta0, tau2, dims, &mut scratch);
        total = total.mul(&c);
        w_sum += mu;
    }
    let m = |i, j, k| total.moment(i, j, k);
    let w = w_sum;
    let g = |i, j| (m(i, j, 0) - m(i, j, 1) / w + m(i, j, 2) / (w * w)) / w;
    let mean = m(1, 0, 0) - g(0, 2);
    if order == Order::Mean {
        return (mean, f64::NAN);
    }
    let g2 = |i, j| (m(i, j, 0) - 2.0 * m(i, j, 1) / w + 3.0 * m(i, j, 2) / (w * w)) / (w * w);
    let second = m(2, 0, 0) - 2.0 * g(1, 2) + g2(0, 4);
    (mean, second - mean * mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Order {
    Mean,
    Variance,
}

impl Order {
    fn dims(self) -> [usize; 3] {
        match self {
            Order::Mean => [2, 3, 3],
            Order::Variance => [3, 5, 3],
        }
    }
}

/// Raw per-study moments `E[A^i U^j D^k]`, restricted to the entries that
/// feed the final moments: the mean uses `(1,0,0)` and `(0,≤2,·)`, the
/// variance (`DU = 5`) adds `(2,0,0)`, `(1,≤2,·)` and `(0,≤4,·)`.
fn accumulate<const DU: usize>(outcomes: &[(f64, f64, f64)], w_mean: f64, inv_mass: f64, poly: &mut Poly3) {
    let mut acc = [[[0.0f64; 3]; DU]; 3];
    for &(p, w, e) in outcomes {
        let q = p * inv_mass;
        let (u, d) = (w * e, w - w_mean);
        let a = u * e;
        let d2 = d * d;
        let mut qu = q;
        for row in acc[0].iter_mut() {
            row[0] += qu;
            row[1] += qu * d;
            row[2] += qu * d2;
            qu *= u;
        }
        let qa = q * a;
        if DU == 5 {
            let mut qau = qa;
            for row in acc[1].iter_mut().take(3) {
                row[0] += qau;
                row[1] += qau * d;
                row[2] += qau * d2;
                qau *= u;
            }
            acc[2][0][0] += qa * a;
        } else {
            acc[1][0][0] += qa;
        }
    }
    for i in 0..poly.dims[0] {
        for j in 0..DU {
            for k in 0..3 {
                let idx = poly.idx(i, j, k);
                poly.c[idx] = acc[i][j][k];
            }
        }
    }
}

/// Truncated exponential generating function in (A, U, D).
#[derive(Debug, Clone)]
struct Poly3 {
    dims: [usize; 3],
    c: Vec<f64>,
}

impl Poly3 {
    fn one(dims: [usize; 3]) -> Self {
        let mut c = vec![0.0; dims[0] * dims[1] * dims[2]];
        c[0] = 1.0;
        Self { dims, c }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    fn mul(&self, other: &Poly3) -> Poly3 {
        let [da, du, dd] = self.dims;
        let mut out = vec![0.0; self.c.len()];
        for i1 in 0..da {
            for j1 in 0..du {
                for k1 in 0..dd {
                    let a = self.c[self.idx(i1, j1, k1)];
                    if a == 0.0 {
                        continue;
                    }
                    for i2 in 0..da - i1 {
                        for j2 in 0..du - j1 {
                            for k2 in 0..dd - k1 {
                                out[self.idx(i1 + i2, j1 + j2, k1 + k2)] += a * other.c[self.idx(i2, j2, k2)];
                            }
                        }
                    }
                }
            }
        }
        Poly3 { dims: self.dims, c: out }
    }

    /// Raw joint moment `E[A^i U^j D^k]`.
    fn moment(&self, i: usize, j: usize, k: usize) -> f64 {
        self.c[self.idx(i, j, k)] * factorial(i) * factorial(j) * factorial(k)
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|x| x as f64).product()
}

/// Logits and variance contributions of one arm for every possible count.
#[derive(Debug, Clone)]
struct ArmTable {
    raw_logit: Vec<f64>,
    raw_var: Vec<f64>,
    adj_logit: Vec<f64>,
    adj_var: Vec<f64>,
}

impl ArmTable {
    fn new(n: u32, adj: &Adjustment) -> Self {
        let nf = n as f64;
        let mut t = ArmTable {
            raw_logit: Vec::with_capacity(n as usize + 1),
            raw_var: Vec::with_capacity(n as usize + 1),
            adj_logit: Vec::with_capacity(n as usize + 1),
            adj_var: Vec::with_capacity(n as usize + 1),
        };
        let n_adj = nf + 2.0 * adj.a;
        let var_n = match adj.denominator {
            VarianceDenominator::Adjusted => n_adj,
            VarianceDenominator::Raw => nf,
        };
        for x in 0..=n {
            let p = x as f64 / nf;
            t.raw_logit.push((p / (1.0 - p)).ln());
            t.raw_var.push(1.0 / (nf * p * (1.0 - p)));
            let pa = (x as f64 + adj.a) / n_adj;
            t.adj_logit.push((pa / (1.0 - pa)).ln());
            t.adj_var.push(1.0 / (var_n * pa * (1.0 - pa)));
        }
        t
    }
}

/// Binomial model of one study with plug-in control probability.
#[derive(Debug, Clone)]
struct StudyModel {
    n_t: u32,
    n_c: u32,
    logit_pc: f64,
    always: bool,
    adjustment: Adjustment,
    treat: ArmTable,
    control: ArmTable,
    control_first: u32,
    control_pmf: Vec<f64>,
}

fn study_models(sample: &EffectSample) -> Result<Vec<StudyModel>> {
    let counts = sample.counts().ok_or(MetaError::MissingCounts)?;
    let adjustment = sample.adjustment().ok_or(MetaError::MissingCounts)?;
    Ok(counts
        .iter()
        .map(|c| StudyModel::new(c.table.n_t, c.table.n_c, c.adjusted.p_c, adjustment))
        .collect())
}

impl StudyModel {
    fn new(n_t: u32, n_c: u32, p_c: f64, adjustment: Adjustment) -> Self {
        let (control_first, control_pmf) = binomial_pmf_window(n_c, p_c, PMF_CUT);
        StudyModel {
            n_t,
            n_c,
            logit_pc: (p_c / (1.0 - p_c)).ln(),
            always: adjustment.policy == ZeroCellPolicy::AlwaysHalf,
            adjustment,
            treat: ArmTable::new(n_t, &adjustment),
            control: ArmTable::new(n_c, &adjustment),
            control_first,
            control_pmf,
        }
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl StudyModel {
    /// Treatment-arm pmf with the study effect mixed over `N(theta, tau2)`.
    fn treatment_pmf(&self, theta: f64, tau2: f64) -> (u32, Vec<f64>) {
        if tau2 <= 0.0 {
            return binomial_pmf_window(self.n_t, logistic(self.logit_pc + theta), PMF_CUT);
        }
        let sd = tau2.sqrt();
        let mut dense = vec![0.0; self.n_t as usize + 1];
        for &(z, wt) in gauss_hermite_normal() {
            // Such nodes cannot move any retained mass by more than the cut.
            if wt < 1e-16 {
                continue;
            }
            let (first, m) = binomial_pmf_window(self.n_t, logistic(self.logit_pc + theta + sd * z), PMF_CUT);
            for (i, p) in m.iter().enumerate() {
                dense[first as usize + i] += wt * p;
            }
        }
        let max = dense.iter().cloned().fold(0.0, f64::max);
        let lo = dense.iter().position(|&p| p >= PMF_CUT * max).unwrap_or(0);
        let hi = dense.iter().rposition(|&p| p >= PMF_CUT * max).unwrap_or(0);
        (lo as u32, dense[lo..=hi].to_vec())
    }

    /// Per-study generating polynomial of `(ŵε², ŵε, ŵ − E ŵ)` and `E ŵ`.
    fn moment_poly(&self, theta0: f64, tau2: f64, dims: [usize; 3], scratch: &mut Vec<(f64, f64, f64)>) -> (Poly3, f64) {
        let (t_first, t_pmf) = self.treatment_pmf(theta0, tau2);
        scratch.clear();
        let (mut mass, mut w_mean) = (0.0, 0.0);
        let max_t = t_pmf.iter().cloned().fold(0.0, f64::max);
        let max_c = self.control_pmf.iter().cloned().fold(0.0, f64::max);
        let floor = PMF_CUT * max_t * max_c;
        let c_lo = self.control_first as usize;
        let c_range = c_lo..c_lo + self.control_pmf.len();
        let c = &self.control;
        let (cl_adj, cv_adj) = (&c.adj_logit[c_range.clone()], &c.adj_var[c_range.clone()]);
        let (cl_raw, cv_raw) = (&c.raw_logit[c_range.clone()], &c.raw_var[c_range]);
        let c_last = self.n_c as usize;
        for (i, &pt) in t_pmf.iter().enumerate() {
            let x_t = (t_first as usize) + i;
            let t_edge = x_t == 0 || x_t == self.n_t as usize;
            let (lt_adj, vt_adj) = (self.treat.adj_logit[x_t], self.treat.adj_var[x_t]);
            let (lt_raw, vt_raw) = (self.treat.raw_logit[x_t], self.treat.raw_var[x_t]);
            for (j, &pc) in self.control_pmf.iter().enumerate() {
                let p = pt * pc;
                let x_c = c_lo + j;
                let c_edge = x_c == 0 || x_c == c_last;
                if p < floor || (t_edge && c_edge && (x_t == 0) == (x_c == 0)) {
                    // Negligible, or a double-zero table.
                    continue;
                }
                // Raw proportions only under the standard policy and without a zero cell.
                let (th, v) = if self.always || t_edge || c_edge {
                    (lt_adj - cl_adj[j], vt_adj + cv_adj[j])
                } else {
                    (lt_raw - cl_raw[j], vt_raw + cv_raw[j])
                };
                let w = 1.0 / (v + tau2);
                mass += p;
                w_mean += p * w;
                scratch.push((p, w, th - theta0));
            }
        }
        w_mean /= mass;
        let [da, du, dd] = dims;
        let mut poly = Poly3 { dims, c: vec![0.0; da * du * dd] };
        if du == 5 {
            accumulate::<5>(scratch, w_mean, 1.0 / mass, &mut poly);
        } else {
            accumulate::<3>(scratch, w_mean, 1.0 / mass, &mut poly);
        }
        for i in 0..da {
            for j in 0..du {
                for k in 0..dd {
                    let idx = poly.idx(i, j, k);
                    poly.c[idx] /= factorial(i) * factorial(j) * factorial(k);
                }
            }
        }
        (poly, w_mean)
    }

    fn draw_effect<R: Rng>(&self, rng: &mut R, theta_i: f64) -> (f64, f64) {
        let p_t = logistic(self.logit_pc + theta_i);
        let p_c = logistic(self.logit_pc);
        let bt = Binomial::new(self.n_t as u64, p_t).expect("valid probability");
        let bc = Binomial::new(self.n_c as u64, p_c).expect("valid probability");
        let mut table = StudyTable { x_t: 0, n_t: self.n_t, x_c: 0, n_c: self.n_c };
        for _ in 0..1_000 {
            table.x_t = bt.sample(rng) as u32;
            table.x_c = bc.sample(rng) as u32;
            if !table.is_double_zero() {
                break;
            }
        }
        self.adjustment.effect(&table).unwrap_or_else(|| {
            // A double zero survived every redraw: fall back to the adjusted estimate.
            let (t, c) = (table.x_t as usize, table.x_c as usize);
            (self.treat.adj_logit[t] - self.control.adj_logit[c], self.treat.adj_var[t] + self.control.adj_var[c])
        })
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn bootstrap(sample: &EffectSample, studies: &[StudyModel], tau2: f64, resamples: usize, seed: u64) -> (f64, f64) {
    let (_, theta0) = QProfile::new(sample).eval_with_mean(tau2);
    let sd = tau2.max(0.0).sqrt();
    let k = studies.len();
    let mut theta = vec![0.0; k];
    let mut weights = vec![0.0; k];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for b in 0..resamples {
        for (i, s) in studies.iter().enumerate() {
            // Same stream for every τ², so the moments vary smoothly along the profile.
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix((b as u64) << 20 | i as u64)));
            let z: f64 = rng.sample(StandardNormal);
            let (th, v) = s.draw_effect(&mut rng, theta0 + sd * z);
            theta[i] = th;
            weights[i] = 1.0 / (v + tau2);
        }
        let q = q_form(&theta, &weights);
        sum += q;
        sum_sq += q * q;
    }
    let n = resamples as f64;
    let mean = sum / n;
    (mean, (sum_sq - n * mean * mean) / (n - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study_data::StudyTable;

    fn sample_from(tables: &[(u32, u32, u32, u32)], policy: ZeroCellPolicy) -> EffectSample {
        let t: Vec<_> = tables.iter().map(|&(a, b, c, d)| StudyTable::new(a, b, c, d).unwrap()).collect();
        EffectSample::from_tables(&t, policy).unwrap()
    }

    #[test]
    fn null_model_moments() {
        let s = sample_from(&[(3, 20, 5, 20), (4, 20, 2, 20), (6, 20, 3, 20), (1, 20, 2, 20), (7, 20, 5, 20)], ZeroCellPolicy::AlwaysHalf);
        assert_eq!(corrected_q_moments(&s, 0.0, &QMomentModel::NullChiSquare).unwrap(), (4.0, 8.0));
        assert_eq!(corrected_q_moments(&s, 2.5, &QMomentModel::NullChiSquare).unwrap(), (4.0, 8.0));
    }

    #[test]
    fn bootstrap_needs_enough_resamples() {
        let s = sample_from(&[(3, 20, 5, 20), (4, 20, 2, 20)], ZeroCellPolicy::AlwaysHalf);
        let m = QMomentModel::BootstrapNull { resamples: 99, seed: 1 };
        assert_eq!(corrected_q_moments(&s, 0.0, &m), Err(MetaError::BootstrapFailure(99)));
    }

    #[test]
    fn corrected_moments_need_counts() {
        let s = EffectSample::from_estimates(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(corrected_q_moments(&s, 0.0, &QMomentModel::KdCorrected), Err(MetaError::MissingCounts));
    }

    #[test]
    fn poly_product_matches_direct_moments() {
        // Two independent two-point variables; E[(A1+A2)(U1+U2)^2] by hand.
        let dims = [2, 3, 1];
        let mk = |vals: &[(f64, f64, f64)]| {
            let mut p = Poly3 { dims, c: vec![0.0; 6] };
            for &(prob, a, u) in vals {
                for i in 0..2 {
                    for j in 0..3 {
                        let idx = p.idx(i, j, 0);
                        p.c[idx] += prob * a.powi(i as i32) * u.powi(j as i32) / (factorial(i) * factorial(j));
                    }
                }
            }
            p
        };
        let x = [(0.3, 1.0, 2.0), (0.7, 0.5, -1.0)];
        let y = [(0.6, 2.0, 0.5), (0.4, 0.1, 3.0)];
        let prod = mk(&x).mul(&mk(&y));
        let mut direct = 0.0;
        for &(p1, a1, u1) in &x {
            for &(p2, a2, u2) in &y {
                direct += p1 * p2 * (a1 + a2) * (u1 + u2).powi(2);
            }
        }
        assert!((prod.moment(1, 2, 0) - direct).abs() < 1e-12);
    }

    #[test]
    fn corrected_moments_approach_chi_square_for_large_arms() {
        let tables: Vec<_> = (0..5).map(|i| (200 + 3 * i, 500, 195 + 2 * i, 500)).collect();
        let s = sample_from(&tables, ZeroCellPolicy::AlwaysHalf);
        let (m, v) = corrected_q_moments(&s, 0.0, &QMomentModel::KdCorrected).unwrap();
        assert!((m - 4.0).abs() < 0.05, "{m}");
        assert!((v - 8.0).abs() < 0.3, "{v}");
    }

    #[test]
    fn design_moments() {
        let big = [StudyDesign { n_t: 2000, n_c: 2000, p_c: 0.4 }; 4];
        let (m, v) = design_q_moments(&big, ZeroCellPolicy::StandardHalf, 0.3, 0.0).unwrap();
        assert!((m - 3.0).abs() < 0.02 && (v - 6.0).abs() < 0.1, "{m} {v}");
        // Small sparse arms pull E[Q] well below k − 1.
        let small = [StudyDesign { n_t: 20, n_c: 20, p_c: 0.1 }; 5];
        let (m, _) = design_q_moments(&small, ZeroCellPolicy::AlwaysHalf, 0.0, 0.0).unwrap();
        assert!(m > 2.0 && m < 3.5, "{m}");
        assert!(design_q_moments(&small[..1], ZeroCellPolicy::AlwaysHalf, 0.0, 0.0).is_err());
        let bad = [StudyDesign { n_t: 20, n_c: 20, p_c: 1.0 }; 2];
        assert!(matches!(design_q_moments(&bad, ZeroCellPolicy::AlwaysHalf, 0.0, 0.0), Err(MetaError::Domain(_))));
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let s = sample_from(&[(3, 20, 5, 20), (4, 20, 2, 20), (6, 20, 3, 20)], ZeroCellPolicy::AlwaysHalf);
        let m = QMomentModel::BootstrapNull { resamples: 200, seed: 9 };
        assert_eq!(corrected_q_moments(&s, 0.3, &m).unwrap(), corrected_q_moments(&s, 0.3, &m).unwrap());
    }
}
