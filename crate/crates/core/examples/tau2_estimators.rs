//! Between-study variance: the five point estimators and five interval
//! methods on one sample, plus the REML score at its optimum.
//!
//! cargo run --example tau2_estimators

use lor_meta::study_data::{EffectSample, StudyTable, ZeroCellPolicy};
use lor_meta::tau_interval::{bj_interval, jackson_interval, kd_interval, pl_interval, qp_interval};
use lor_meta::tau_point::{
    dl_estimate, jackson_estimate, kd_estimate, mp_estimate, reml_estimate, reml_score, KdConfig,
};

fn main() -> lor_meta::Result<()> {
    let raw = [(15, 100, 5, 100), (30, 120, 18, 110), (8, 60, 9, 60), (22, 80, 7, 85), (40, 150, 30, 150)];
    let tables = raw
        .iter()
        .map(|&(a, b, c, d)| StudyTable::new(a, b, c, d))
        .collect::<lor_meta::Result<Vec<_>>>()?;
    let standard = EffectSample::from_tables(&tables, ZeroCellPolicy::StandardHalf)?;
    let always = EffectSample::from_tables(&tables, ZeroCellPolicy::AlwaysHalf)?;
    let kd = KdConfig::default();

    println!("point estimates of tau^2");
    for e in [dl_estimate(&standard), reml_estimate(&standard), mp_estimate(&standard), jackson_estimate(&standard)] {
        println!("  {:<4} {:.5}  (truncated at 0: {})", e.method, e.value, e.truncated_at_zero);
    }
    let e = kd_estimate(&always, &kd)?;
    println!("  {:<4} {:.5}  ({} profile evaluations)", e.method, e.value, e.iterations);

    let reml = reml_estimate(&standard).value;
    if reml > 0.0 {
        println!("REML score at the optimum: {:.2e}", reml_score(&standard, reml));
    }

    println!("95% intervals");
    for ci in [
        qp_interval(&standard, 0.95)?,
        bj_interval(&standard, 0.95)?,
        jackson_interval(&standard, 0.95)?,
        pl_interval(&standard, 0.95)?,
        kd_interval(&always, &kd, 0.95)?,
    ] {
        let open = if ci.open_upper { " (open upper end)" } else { "" };
        println!("  {:<3} [{:.5}, {:.5}]{open}", ci.method, ci.lower, ci.upper);
    }
    Ok(())
}
