//! Per-cell performance summaries of the raw replicate records, and the
//! per-figure panel CSVs built from them.
//!
//! Aggregation groups records by cell, estimator and replicate before any
//! arithmetic, and sums in replicate order, so the result does not depend on
//! the order of the input records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{Estimator, Quantity, Status};
use crate::effect::ThetaMethod;
use crate::error::{MetaError, Result};
use crate::sim::{CellKey, RawRecord};
use crate::tau_point::TAU2_MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    BiasTau2,
    CoverageTau2,
    BiasTheta,
    CoverageTheta,
    MseTheta,
    MseRatioSswOverIv,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::BiasTau2,
        Metric::CoverageTau2,
        Metric::BiasTheta,
        Metric::CoverageTheta,
        Metric::MseTheta,
        Metric::MseRatioSswOverIv,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::BiasTau2 => "bias_tau2",
            Metric::CoverageTau2 => "coverage_tau2",
            Metric::BiasTheta => "bias_theta",
            Metric::CoverageTheta => "coverage_theta",
            Metric::MseTheta => "mse_theta",
            Metric::MseRatioSswOverIv => "mse_ratio_ssw_over_iv",
        }
    }

    /// File-name prefix of the panel family.
    pub fn panel_prefix(&self) -> &'static str {
        match self {
            Metric::BiasTau2 => "biasTau",
            Metric::CoverageTau2 => "coverageTau",
            Metric::BiasTheta => "biasTheta",
            Metric::CoverageTheta => "coverageTheta",
            Metric::MseTheta => "mseTheta",
            Metric::MseRatioSswOverIv => "mseRatio",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

/// One metric of one method in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub cell: CellKey,
    /// Estimator name, or `SSW/IV_MP`-style labels for MSE ratios.
    pub method: String,
    pub metric: Metric,
    /// `None` when no replicate contributed.
    pub value: Option<f64>,
    /// `None` when fewer than two replicates contributed to a mean.
    pub mc_se: Option<f64>,
    pub n_effective: usize,
    /// Distinct replicates seen in the cell.
    pub replications: usize,
}

type Series = BTreeMap<u64, (Option<f64>, Status)>;

#[derive(Default)]
struct CellData {
    reps: BTreeSet<u64>,
    usable: usize,
    series: BTreeMap<(Estimator, Quantity), Series>,
}

impl CellData {
    fn usable_values(&self, est: Estimator, q: Quantity) -> BTreeMap<u64, (f64, Status)> {
        self.series
            .get(&(est, q))
            .map(|s| {
                s.iter()
                    .filter_map(|(rep, (v, st))| match v {
                        Some(x) if !st.is_na() && x.is_finite() => Some((*rep, (*x, *st))),
                        _ => None,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Mean and its Monte Carlo standard error.
fn mean_se(x: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = x.len();
    if n == 0 {
        return (None, None);
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

fn proportion_se(hits: usize, n: usize) -> (Option<f64>, Option<f64>) {
    if n == 0 {
        return (None, None);
    }
    let p = hits as f64 / n as f64;
    (Some(p), Some((p * (1.0 - p) / n as f64).sqrt()))
}

/// `mean(a)/mean(b)` over paired draws with a delta-method standard error.
fn ratio_se(a: &[f64], b: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = a.len();
    if n == 0 {
        return (None, None);
    }
    let nf = n as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / nf, b.iter().sum::<f64>() / nf);
    let r = ma / mb;
    if n < 2 || mb == 0.0 {
        return (Some(r), None);
    }
    let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        vaa += (x - ma).powi(2);
        vbb += (y - mb).powi(2);
        vab += (x - ma) * (y - mb);
    }
    let d = nf - 1.0;
    let (vaa, vbb, vab) = (vaa / d, vbb / d, vab / d);
    let var = (vaa - 2.0 * r * vab + r * r * vbb) / (mb * mb * nf);
    (Some(r), Some(var.max(0.0).sqrt()))
}

/// Summarises raw replicate records cell by cell.
///
/// Bias and MSE use the cell's generating τ² and θ. An interval flagged
/// `capped` has an open upper end and covers any τ² up to the search cap.
/// NA values are left out and show up as a smaller `n_effective`.
pub fn aggregate(records: &[RawRecord]) -> Result<Vec<MetricRecord>> {
    let mut cells: BTreeMap<CellKey, CellData> = BTreeMap::new();
    for r in records {
        let cell = cells.entry(r.cell).or_default();
        cell.reps.insert(r.rep);
        if !r.status.is_na() {
            cell.usable += 1;
        }
        let series = cell.series.entry((r.estimator, r.quantity)).or_default();
        if series.insert(r.rep, (r.value, r.status)).is_some() {
            return Err(MetaError::InvalidInput(format!(
                "duplicate record for {} rep {} {} {}",
                r.cell,
                r.rep,
                r.estimator,
                r.quantity.as_str()
            )));
        }
    }

    let mut out = Vec::new();
    for (key, data) in &cells {
        if data.usable == 0 {
            return Err(MetaError::EmptyCell(key.to_string()));
        }
        let ests: BTreeSet<Estimator> = data.series.keys().map(|(e, _)| *e).collect();
        let push = |out: &mut Vec<MetricRecord>, method: String, metric, (value, mc_se), n| {
            out.push(MetricRecord {
                cell: *key,
                method,
                metric,
                value,
                mc_se,
                n_effective: n,
                replications: data.reps.len(),
            })
        };
        for &est in &ests {
            let name = est.name().to_string();
            match est {
                Estimator::TauPoint(_) => {
                    let dev: Vec<f64> =
                        data.usable_values(est, Quantity::Tau2Point).values().map(|(v, _)| v - key.tau2).collect();
                    push(&mut out, name, Metric::BiasTau2, mean_se(&dev), dev.len());
                }
                Estimator::TauInterval(_) => {
                    let (hits, n) = coverage(data, est, Quantity::Tau2Lo, Quantity::Tau2Hi, key.tau2, true);
                    push(&mut out, name, Metric::CoverageTau2, proportion_se(hits, n), n);
                }
                Estimator::ThetaPoint(_) => {
                    let dev: Vec<f64> =
                        data.usable_values(est, Quantity::ThetaPoint).values().map(|(v, _)| v - key.theta).collect();
                    let sq: Vec<f64> = dev.iter().map(|d| d * d).collect();
                    push(&mut out, name.clone(), Metric::BiasTheta, mean_se(&dev), dev.len());
                    push(&mut out, name, Metric::MseTheta, mean_se(&sq), sq.len());
                }
                Estimator::ThetaInterval(_) => {
                    let (hits, n) = coverage(data, est, Quantity::ThetaLo, Quantity::ThetaHi, key.theta, false);
                    push(&mut out, name, Metric::CoverageTheta, proportion_se(hits, n), n);
                }
            }
        }
        let ssw = Estimator::ThetaPoint(ThetaMethod::Ssw);
        for iv in [ThetaMethod::IvMp, ThetaMethod::IvKd] {
            let iv = Estimator::ThetaPoint(iv);
            if !(ests.contains(&ssw) && ests.contains(&iv)) {
                continue;
            }
            let a = data.usable_values(ssw, Quantity::ThetaPoint);
            let b = data.usable_values(iv, Quantity::ThetaPoint);
            let (mut sa, mut sb) = (Vec::new(), Vec::new());
            for (rep, (x, _)) in &a {
                if let Some((y, _)) = b.get(rep) {
                    sa.push((x - key.theta).powi(2));
                    sb.push((y - key.theta).powi(2));
                }
            }
            let n = sa.len();
            push(&mut out, format!("{}/{}", ssw.name(), iv.name()), Metric::MseRatioSswOverIv, ratio_se(&sa, &sb), n);
        }
    }
    Ok(out)
}

fn coverage(data: &CellData, est: Estimator, lo: Quantity, hi: Quantity, truth: f64, tau: bool) -> (usize, usize) {
    let lower = data.usable_values(est, lo);
    let upper = data.usable_values(est, hi);
    let (mut hits, mut n) = (0, 0);
    for (rep, (l, _)) in &lower {
        let Some((u, status)) = upper.get(rep) else { continue };
        n += 1;
        let open = tau && *status == Status::Capped;
        let below = if open { truth <= TAU2_MAX } else { truth <= *u };
        if *l <= truth && below {
            hits += 1;
        }
    }
    (hits, n)
}

/// Which metric families [`emit_panels`] writes.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelLayout {
    pub metrics: Vec<Metric>,
}

impl Default for PanelLayout {
    fn default() -> Self {
        Self { metrics: Metric::ALL.to_vec() }
    }
}

/// Column header of every panel file.
pub const PANEL_HEADER: &str = "k,n,tau2,method,value,mc_se,n_effective";

/// `0.1 → 01`, `0.75 → 075`, `1.5 → 1p5`, `2 → 2`, `-0.5 → m05`.
fn tag(x: f64) -> String {
    let s = format!("{}", x.abs());
    let body = if x.abs() < 1.0 { s.replace('.', "") } else { s.replace('.', "p") };
    if x < 0.0 {
        format!("m{body}")
    } else {
        body
    }
}

/// File name of one figure: metric family, `p_C`, θ, q and size scheme.
pub fn panel_file_name(metric: Metric, cell: &CellKey) -> String {
    format!(
        "{}_pc{}_theta{}_q{}_{}.csv",
        metric.panel_prefix(),
        tag(cell.p_c),
        tag(cell.theta),
        tag(cell.q),
        cell.size_scheme.kind()
    )
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.16e}"))
}

/// Writes one CSV per (metric family, `p_C`, θ, q, size scheme). Rows are
/// sorted by K, n, τ² and method, so each file holds the panels of one
/// figure. Returns the written paths in sorted order; no metrics, no files.
pub fn emit_panels(metrics: &[MetricRecord], layout: &PanelLayout, out_dir: &Path) -> Result<Vec<PathBuf>> {
    type Row = (usize, u32, u64, String);
    let mut files: BTreeMap<String, BTreeMap<Row, String>> = BTreeMap::new();
    for m in metrics.iter().filter(|m| layout.metrics.contains(&m.metric)) {
        let c = &m.cell;
        let row = format!(
            "{},{},{},{},{},{},{}",
            c.k,
            c.size_scheme.n(),
            c.tau2,
            m.method,
            fmt_opt(m.value),
            fmt_opt(m.mc_se),
            m.n_effective
        );
        // τ² is nonnegative, so its bit pattern sorts like the value.
        let key = (c.k, c.size_scheme.n(), c.tau2.to_bits(), m.method.clone());
        files.entry(panel_file_name(m.metric, c)).or_default().insert(key, row);
    }
    if files.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for (name, rows) in files {
        let mut text = String::from(PANEL_HEADER);
        text.push('\n');
        for line in rows.values() {
            text.push_str(line);
            text.push('\n');
        }
        let path = out_dir.join(name);
        fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}
