//! Numerical building blocks: bracketed root finding, golden-section search,
//! quantile functions and quadrature nodes.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::gamma::{gamma_lr, ln_gamma};

/// Outcome of a bracketed root search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Brent's method on `[a, b]`, where `f(a)` and `f(b)` must differ in sign
/// (a zero at either end is accepted). Stops once the bracket is narrower than
/// `xtol` or `f` vanishes exactly.
pub fn brent<F: FnMut(f64) -> f64>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
    mut fb: f64,
    xtol: f64,
    max_iter: usize,
) -> Root {
    if fa == 0.0 {
        return Root { x: a, iterations: 0, converged: true };
    }
    if fb == 0.0 {
        return Root { x: b, iterations: 0, converged: true };
    }
    debug_assert!(fa.signum() != fb.signum(), "brent: no sign change");
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for it in 1..=max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Root { x: b, iterations: it, converged: true };
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b);
    }
    Root { x: b, iterations: max_iter, converged: false }
}

/// Plain bisection; same contract as [`brent`].
pub fn bisect<F: FnMut(f64) -> f64>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    fa: f64,
    xtol: f64,
    max_iter: usize,
) -> Root {
    let sa = fa.signum();
    for it in 1..=max_iter {
        let m = 0.5 * (a + b);
        if (b - a).abs() <= xtol {
            return Root { x: m, iterations: it, converged: true };
        }
        let fm = f(m);
        if fm == 0.0 {
            return Root { x: m, iterations: it, converged: true };
        }
        if fm.signum() == sa {
            a = m;
        } else {
            b = m;
        }
    }
    Root { x: 0.5 * (a + b), iterations: max_iter, converged: false }
}

/// Golden-section search for the maximiser of a unimodal `f` on `[a, b]`.
pub fn golden_section_max<F: FnMut(f64) -> f64>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    xtol: f64,
    max_iter: usize,
) -> Root {
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for it in 1..=max_iter {
        if (b - a).abs() <= xtol {
            return Root { x: 0.5 * (a + b), iterations: it, converged: true };
        }
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        }
    }
    Root { x: 0.5 * (a + b), iterations: max_iter, converged: false }
}

/// Safeguarded Newton iteration for `cdf(x) = p` on `[lo, hi]`.
fn invert_cdf(
    cdf: impl Fn(f64) -> f64,
    pdf: impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    start: f64,
    p: f64,
) -> f64 {
    let mut x = start.clamp(lo, hi);
    for _ in 0..200 {
        let fx = cdf(x) - p;
        if fx == 0.0 {
            return x;
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = pdf(x);
        let mut next = if d > 0.0 && d.is_finite() { x - fx / d } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.abs().max(1e-300) || hi - lo <= 1e-15 * hi.abs() {
            return next;
        }
        x = next;
    }
    x
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

pub fn t_cdf(x: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).expect("valid t").cdf(x)
}

pub fn t_quantile(p: f64, df: f64) -> f64 {
    let t = StudentsT::new(0.0, 1.0, df).expect("valid t");
    let ln_norm = ln_gamma(0.5 * (df + 1.0))
        - ln_gamma(0.5 * df)
        - 0.5 * (df * std::f64::consts::PI).ln();
    let pdf = move |x: f64| (ln_norm - 0.5 * (df + 1.0) * (1.0 + x * x / df).ln()).exp();
    let start = t.inverse_cdf(p);
    let span = start.abs().max(1.0);
    invert_cdf(|x| t.cdf(x), pdf, start - span, start + span, start, p)
}

/// Regularised lower incomplete gamma CDF of Gamma(shape, scale).
pub fn gamma_cdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(shape, x / scale)
    }
}

fn gamma_pdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let z = x / scale;
    ((shape - 1.0) * z.ln() - z - ln_gamma(shape)).exp() / scale
}

pub fn gamma_quantile(p: f64, shape: f64, scale: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    // Wilson-Hilferty start, in units of the scale.
    let z = normal_quantile(p);
    let c = 1.0 / (9.0 * shape);
    let wh = shape * (1.0 - c + z * c.sqrt()).powi(3);
    let start = if wh > 0.0 { wh } else { shape * 0.5 };
    let mut hi = (shape + 10.0 * shape.sqrt() + 50.0).max(2.0 * start);
    while gamma_lr(shape, hi) < p {
        hi *= 2.0;
    }
    let x = invert_cdf(
        |x| gamma_cdf(x, shape, 1.0),
        |x| gamma_pdf(x, shape, 1.0),
        0.0,
        hi,
        start,
        p,
    );
    x * scale
}

pub fn chi2_cdf(x: f64, df: f64) -> f64 {
    gamma_cdf(x, 0.5 * df, 2.0)
}

pub fn chi2_quantile(p: f64, df: f64) -> f64 {
    gamma_quantile(p, 0.5 * df, 2.0)
}

/// Gauss-Hermite rule for expectations under the standard normal:
/// `E[g(Z)] ~ sum w_i g(z_i)`, weights summing to one.
pub fn gauss_hermite_normal() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| golub_welsch(24))
}

fn golub_welsch(n: usize) -> Vec<(f64, f64)> {
    // Jacobi matrix of the probabilists' Hermite polynomials.
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut rule: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = rule.iter().map(|r| r.1).sum();
    for r in &mut rule {
        r.1 /= total;
    }
    rule
}

/// Binomial(n, p) probabilities restricted to the support points whose mass
/// exceeds `cut` times the modal mass. Returns the first index and the masses.
pub fn binomial_pmf_window(n: u32, p: f64, cut: f64) -> (u32, Vec<f64>) {
    if p <= 0.0 {
        return (0, vec![1.0]);
    }
    if p >= 1.0 {
        return (n, vec![1.0]);
    }
    let nf = n as f64;
    let mode = (((nf + 1.0) * p).floor() as u32).min(n);
    let ratio = p / (1.0 - p);
    // Work relative to the mode to avoid underflow of the raw masses.
    let mut up = Vec::new();
    let mut v = 1.0;
    let mut k = mode;
    while k < n {
        v *= (nf - k as f64) / (k as f64 + 1.0) * ratio;
        if v < cut {
            break;
        }
        up.push(v);
        k += 1;
    }
    let mut down = Vec::new();
    let mut v = 1.0;
    let mut k = mode;
    while k > 0 {
        v *= k as f64 / ((nf - k as f64 + 1.0) * ratio);
        if v < cut {
            break;
        }
        down.push(v);
        k -= 1;
    }
    let first = mode - down.len() as u32;
    let mut masses: Vec<f64> = down.into_iter().rev().collect();
    masses.push(1.0);
    masses.extend(up);
    let log_mode = ln_gamma(nf + 1.0) - ln_gamma(mode as f64 + 1.0) - ln_gamma(nf - mode as f64 + 1.0)
        + mode as f64 * p.ln()
        + (nf - mode as f64) * (1.0 - p).ln();
    let scale = log_mode.exp();
    for m in &mut masses {
        *m *= scale;
    }
    (first, masses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_finds_sqrt2() {
        let r = brent(|x| x * x - 2.0, 0.0, 2.0, -2.0, 2.0, 1e-12, 100);
        assert!(r.converged);
        assert!((r.x - 2f64.sqrt()).abs() < 1e-11);
    }

    #[test]
    fn bisect_matches_brent() {
        let f = |x: f64| x.exp() - 3.0;
        let b = bisect(f, 0.0, 2.0, f(0.0), 1e-10, 200);
        assert!((b.x - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn golden_section_finds_peak() {
        let r = golden_section_max(|x| -(x - 1.3).powi(2), 0.0, 5.0, 1e-9, 500);
        assert!((r.x - 1.3).abs() < 1e-8);
    }

    #[test]
    fn quantiles_hit_reference_values() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((t_quantile(0.975, 1.0) - 12.706204736174698).abs() < 1e-9);
        assert!((t_quantile(0.975, 9.0) - 2.262157162798205).abs() < 1e-10);
        assert!((chi2_quantile(0.95, 1.0) - 3.841458820694124).abs() < 1e-9);
        assert!((chi2_quantile(0.95, 4.0) - 9.487729036781154).abs() < 1e-9);
        assert!((chi2_quantile(0.025, 9.0) - 2.700389499980662).abs() < 1e-9);
        assert!((chi2_quantile(0.975, 4.0) - 11.143286781877796).abs() < 1e-9);
    }

    #[test]
    fn gamma_quantile_inverts_cdf() {
        for &(shape, scale) in &[(0.3, 2.0), (2.0, 2.0), (15.0, 0.7), (120.0, 0.1)] {
            for &p in &[0.001, 0.025, 0.5, 0.975, 0.999] {
                let x = gamma_quantile(p, shape, scale);
                assert!((gamma_cdf(x, shape, scale) - p).abs() < 1e-12, "{shape} {scale} {p}");
            }
        }
    }

    #[test]
    fn hermite_rule_integrates_moments() {
        let rule = gauss_hermite_normal();
        let m = |k: i32| rule.iter().map(|(z, w)| w * z.powi(k)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
    }

    #[test]
    fn binomial_window_sums_to_one() {
        for &(n, p) in &[(20u32, 0.1), (500, 0.4), (750, 0.9), (3, 0.5)] {
            let (first, m) = binomial_pmf_window(n, p, 1e-16);
            let s: f64 = m.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "{n} {p} {s}");
            assert!(first as usize + m.len() <= n as usize + 1);
        }
        let (first, m) = binomial_pmf_window(10, 0.3, 0.0);
        assert_eq!(first, 0);
        assert!((m[0] - 0.7f64.powi(10)).abs() < 1e-15);
    }
}
