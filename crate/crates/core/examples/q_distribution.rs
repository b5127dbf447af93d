//! Distribution of Cochran's Q: the Q profile, the exact weighted chi-square
//! mixture under normal effects, and the small-sample corrected moments for
//! log-odds-ratios against the nominal chi-square values.
//!
//! cargo run --example q_distribution

use lor_meta::numeric::chi2_cdf;
use lor_meta::q_statistics::{
    cochran_q, corrected_q_moments, generalized_q, rem_mixture_weights, weighted_chisq_mixture_cdf, QMomentModel, QProfile,
};
use lor_meta::study_data::{EffectSample, StudyTable, ZeroCellPolicy};
use lor_meta::tau_point::jackson_weights;

fn main() -> lor_meta::Result<()> {
    // Small studies with rare events: where the chi-square approximation is weakest.
    let raw = [(3, 20, 2, 20), (6, 20, 1, 20), (2, 20, 3, 20), (4, 20, 2, 20), (5, 20, 1, 20)];
    let tables = raw
        .iter()
        .map(|&(a, b, c, d)| StudyTable::new(a, b, c, d))
        .collect::<lor_meta::Result<Vec<_>>>()?;
    let sample = EffectSample::from_tables(&tables, ZeroCellPolicy::AlwaysHalf)?;
    let k = sample.k() as f64;

    let q = cochran_q(&sample);
    println!("Q = {q:.4} on {} df, chi-square p-value {:.4}", k - 1.0, 1.0 - chi2_cdf(q, k - 1.0));

    let profile = QProfile::new(&sample);
    for tau2 in [0.0, 0.1, 0.5, 1.0] {
        println!("  Q({tau2:.1}) = {:.4}", profile.eval(tau2));
    }

    // With weights 1/σ̂ᵢ the generalised Q follows a weighted chi-square mixture.
    let w = jackson_weights(&sample);
    let qw = generalized_q(&sample, &w);
    let lambdas = rem_mixture_weights(&sample, &w, 0.0);
    let cdf = weighted_chisq_mixture_cdf(&lambdas, qw, 1e-9)?;
    println!("Q_w = {qw:.4}, mixture weights {lambdas:.4?}, P(Q_w <= observed) = {cdf:.4}");

    let (m, v) = corrected_q_moments(&sample, 0.0, &QMomentModel::KdCorrected)?;
    let (mb, vb) = corrected_q_moments(&sample, 0.0, &QMomentModel::BootstrapNull { resamples: 4000, seed: 11 })?;
    println!("E[Q], Var[Q] at tau^2 = 0");
    println!("  nominal     {:.4}  {:.4}", k - 1.0, 2.0 * (k - 1.0));
    println!("  corrected   {m:.4}  {v:.4}");
    println!("  bootstrap   {mb:.4}  {vb:.4}");
    Ok(())
}
