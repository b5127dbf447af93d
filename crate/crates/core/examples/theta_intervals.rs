//! Overall log-odds-ratio: inverse-variance, HKSJ and sample-size-weighted
//! estimates and intervals on the same data.
//!
//! cargo run --example theta_intervals

use lor_meta::effect::{
    hksj_interval, iv_interval, iv_point, ssw_interval, ssw_point, ThetaIntervalMethod, ThetaMethod,
};
use lor_meta::study_data::{EffectSample, StudyTable, ZeroCellPolicy};
use lor_meta::tau_point::{dl_estimate, kd_estimate, KdConfig};

fn main() -> lor_meta::Result<()> {
    let raw = [(14, 70, 6, 70), (3, 25, 1, 25), (25, 90, 12, 95), (7, 40, 5, 40), (30, 200, 10, 200), (2, 30, 0, 30)];
    let tables = raw
        .iter()
        .map(|&(a, b, c, d)| StudyTable::new(a, b, c, d))
        .collect::<lor_meta::Result<Vec<_>>>()?;
    let standard = EffectSample::from_tables(&tables, ZeroCellPolicy::StandardHalf)?;
    let always = EffectSample::from_tables(&tables, ZeroCellPolicy::AlwaysHalf)?;

    let tau2_dl = dl_estimate(&standard).value;
    let tau2_kd = kd_estimate(&always, &KdConfig::default())?.value;
    println!("tau^2: DL {tau2_dl:.4}, KD {tau2_kd:.4}");

    let show = |name: &str, point: f64, lo: f64, hi: f64| {
        println!("{name:<8} {point:>8.4}  [{lo:.4}, {hi:.4}]  OR {:.3}", point.exp());
    };
    let iv = iv_interval(&standard, tau2_dl, ThetaIntervalMethod::IvDl)?;
    show("IV_DL", iv_point(&standard, tau2_dl, ThetaMethod::IvDl)?.value, iv.lower(), iv.upper());
    let hk = hksj_interval(&standard, tau2_dl, ThetaIntervalMethod::HksjDl)?;
    show("HKSJ_DL", hk.center, hk.lower(), hk.upper());
    let iv = iv_interval(&always, tau2_kd, ThetaIntervalMethod::IvKd)?;
    show("IV_KD", iv.center, iv.lower(), iv.upper());
    let ssw = ssw_interval(&always, tau2_kd)?;
    show("SSW_KD", ssw_point(&always).value, ssw.lower(), ssw.upper());
    Ok(())
}
