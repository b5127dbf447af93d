//! Full estimator roster on a handful of 2x2 tables, including a
//! double-zero study that is dropped before analysis.
//!
//! cargo run --example analyze_tables

use lor_meta::analysis::{Analysis, Summary};
use lor_meta::study_data::StudyTable;

fn main() -> lor_meta::Result<()> {
    // (x_t, n_t, x_c, n_c)
    let raw = [(12, 50, 8, 50), (0, 40, 0, 40), (20, 60, 11, 60), (5, 30, 2, 30), (0, 25, 3, 25), (9, 45, 4, 44)];
    let tables = raw
        .iter()
        .map(|&(a, b, c, d)| StudyTable::new(a, b, c, d))
        .collect::<lor_meta::Result<Vec<_>>>()?;

    let rows = Analysis::default().run(&tables);
    println!("{} tables, k = {} after exclusions", tables.len(), rows[0].k_used);
    for row in rows {
        let shown = match row.summary {
            Some(Summary::Point(v)) => format!("{v:>9.4}"),
            Some(Summary::Interval { lower, upper }) => format!("[{lower:.4}, {upper:.4}]"),
            None => "NA".into(),
        };
        let target = if row.estimator.targets_tau2() { "tau2" } else { "theta" };
        println!("{:<8} {:<5} {:<13} {:<8} {shown}", row.estimator, target, row.policy.as_str(), row.status.as_str());
    }
    Ok(())
}
