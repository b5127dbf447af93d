//! One simulation cell: generate meta-analyses of binomial tables,
//! run a few estimators and summarise bias and coverage.
//!
//! cargo run --release --example simulate_cell

use lor_meta::analysis::{Analysis, Estimator};
use lor_meta::metrics::aggregate;
use lor_meta::sim::{generate_meta_sample, run_sweep, SimConfig, SizeScheme};

fn main() -> lor_meta::Result<()> {
    let cfg = SimConfig {
        k: 10,
        size_scheme: SizeScheme::Unequal(60),
        q: 0.5,
        theta: 1.0,
        tau2: 0.4,
        p_c: 0.2,
        replications: 400,
        seed: 2024,
    };
    let first = generate_meta_sample(&cfg, 0)?;
    println!("replicate 0, study effects drawn around theta = {}:", cfg.theta);
    for (t, th) in first.tables.iter().zip(&first.latent_theta) {
        println!("  theta_i {th:>7.3}  table {t:?}");
    }

    let roster = Estimator::select_list("DL,REML,QP,IV_DL,SSW,SSW_KD")?;
    let records = run_sweep(&[cfg], &Analysis::new(roster), 2)?;
    println!("\n{} over {} replicates", cfg.key(), cfg.replications);
    for m in aggregate(&records)? {
        println!(
            "  {:<10} {:<22} {:>9.4} +/- {:.4}  (n = {})",
            m.method,
            m.metric.as_str(),
            m.value.unwrap_or(f64::NAN),
            m.mc_se.unwrap_or(f64::NAN),
            m.n_effective
        );
    }
    Ok(())
}
