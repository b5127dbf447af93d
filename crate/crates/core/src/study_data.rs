//! 2×2 study tables, zero-cell handling and study-level log-odds-ratios.

use std::io::Read;

use crate::error::{MetaError, Result};

/// Event counts and arm sizes of one study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StudyTable {
    pub x_t: u32,
    pub n_t: u32,
    pub x_c: u32,
    pub n_c: u32,
}

impl StudyTable {
    pub fn new(x_t: u32, n_t: u32, x_c: u32, n_c: u32) -> Result<Self> {
        if n_t == 0 || n_c == 0 {
            return Err(MetaError::InvalidTable(format!("empty arm (n_t={n_t}, n_c={n_c})")));
        }
        if x_t > n_t || x_c > n_c {
            return Err(MetaError::InvalidTable(format!(
                "events exceed arm size ({x_t}/{n_t}, {x_c}/{n_c})"
            )));
        }
        Ok(Self { x_t, n_t, x_c, n_c })
    }

    /// True when any of the four cells is empty.
    pub fn has_zero_cell(&self) -> bool {
        self.x_t == 0 || self.x_t == self.n_t || self.x_c == 0 || self.x_c == self.n_c
    }

    /// Both arms empty in the same row: no events anywhere, or events everywhere.
    pub fn is_double_zero(&self) -> bool {
        (self.x_t == 0 && self.x_c == 0) || (self.x_t == self.n_t && self.x_c == self.n_c)
    }

    pub fn swap_arms(&self) -> Self {
        Self { x_t: self.x_c, n_t: self.n_c, x_c: self.x_t, n_c: self.n_t }
    }

    /// Effective sample size `n_t n_c / (n_t + n_c)`.
    pub fn effective_size(&self) -> f64 {
        let (nt, nc) = (self.n_t as f64, self.n_c as f64);
        nt * nc / (nt + nc)
    }
}

/// How empty cells are handled before forming log-odds-ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ZeroCellPolicy {
    /// Add `a` to every cell only for tables with at least one empty cell.
    StandardHalf,
    /// Add `a` to every cell of every table.
    AlwaysHalf,
}

impl ZeroCellPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            ZeroCellPolicy::StandardHalf => "standard_half",
            ZeroCellPolicy::AlwaysHalf => "always_half",
        }
    }
}

impl std::str::FromStr for ZeroCellPolicy {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard_half" | "standard" => Ok(ZeroCellPolicy::StandardHalf),
            "always_half" | "always" => Ok(ZeroCellPolicy::AlwaysHalf),
            other => Err(MetaError::InvalidInput(format!("unknown zero-cell policy `{other}`"))),
        }
    }
}

/// Arm size used in the delta-method variance once a table has been adjusted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum VarianceDenominator {
    /// `n + 2a`, the same denominator as the adjusted proportion.
    #[default]
    Adjusted,
    /// The raw arm size `n`.
    Raw,
}

/// Zero-cell policy together with the added constant and variance denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adjustment {
    pub policy: ZeroCellPolicy,
    pub a: f64,
    pub denominator: VarianceDenominator,
}

impl Adjustment {
    pub fn new(policy: ZeroCellPolicy) -> Self {
        Self { policy, a: 0.5, denominator: VarianceDenominator::Adjusted }
    }

    /// Log-odds-ratio and its variance for a table, `None` for double zeros.
    #[inline]
    pub fn effect(&self, t: &StudyTable) -> Option<(f64, f64)> {
        match adjust_table(t, self.policy, self.a) {
            Adjusted::Excluded => None,
            Adjusted::Proportions(adj) => {
                let (nt, nc) = match self.denominator {
                    VarianceDenominator::Adjusted => (adj.n_t_adj, adj.n_c_adj),
                    VarianceDenominator::Raw => (t.n_t as f64, t.n_c as f64),
                };
                let theta = logit(adj.p_t) - logit(adj.p_c);
                Some((theta, lor_variance(adj.p_t, nt, adj.p_c, nc)))
            }
        }
    }
}

impl Default for Adjustment {
    fn default() -> Self {
        Self::new(ZeroCellPolicy::StandardHalf)
    }
}

/// Proportions after zero-cell adjustment, with the sizes they were formed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjustedTable {
    pub p_t: f64,
    pub p_c: f64,
    pub n_t_adj: f64,
    pub n_c_adj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Adjusted {
    Proportions(AdjustedTable),
    Excluded,
}

pub fn adjust_table(t: &StudyTable, policy: ZeroCellPolicy, a: f64) -> Adjusted {
    debug_assert!(a > 0.0);
    if t.is_double_zero() {
        return Adjusted::Excluded;
    }
    let add = match policy {
        ZeroCellPolicy::AlwaysHalf => a,
        ZeroCellPolicy::StandardHalf if t.has_zero_cell() => a,
        ZeroCellPolicy::StandardHalf => 0.0,
    };
    let n_t_adj = t.n_t as f64 + 2.0 * add;
    let n_c_adj = t.n_c as f64 + 2.0 * add;
    Adjusted::Proportions(AdjustedTable {
        p_t: (t.x_t as f64 + add) / n_t_adj,
        p_c: (t.x_c as f64 + add) / n_c_adj,
        n_t_adj,
        n_c_adj,
    })
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn log_odds_ratio(p_t: f64, p_c: f64) -> Result<f64> {
    for p in [p_t, p_c] {
        if !(p > 0.0 && p < 1.0) {
            return Err(MetaError::Domain(p));
        }
    }
    Ok(logit(p_t) - logit(p_c))
}

/// Delta-method variance of the log-odds-ratio.
#[inline]
pub fn lor_variance(p_t: f64, n_t_adj: f64, p_c: f64, n_c_adj: f64) -> f64 {
    1.0 / (n_t_adj * p_t * (1.0 - p_t)) + 1.0 / (n_c_adj * p_c * (1.0 - p_c))
}

/// Counts behind one retained study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyCounts {
    pub table: StudyTable,
    pub adjusted: AdjustedTable,
}

/// Study-level estimates for the retained studies of one meta-analysis.
///
/// Samples built from tables keep the counts, which the corrected moment
/// providers need; samples built from bare estimates do not.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectSample {
    theta: Vec<f64>,
    sigma2: Vec<f64>,
    n_tilde: Vec<f64>,
    counts: Option<Vec<StudyCounts>>,
    adjustment: Option<Adjustment>,
    excluded: usize,
}

impl EffectSample {
    /// Builds a sample under `policy` with `a = 1/2`.
    pub fn from_tables(tables: &[StudyTable], policy: ZeroCellPolicy) -> Result<Self> {
        Self::with_adjustment(tables, Adjustment::new(policy))
    }

    pub fn with_adjustment(tables: &[StudyTable], adjustment: Adjustment) -> Result<Self> {
        let mut theta = Vec::with_capacity(tables.len());
        let mut sigma2 = Vec::with_capacity(tables.len());
        let mut n_tilde = Vec::with_capacity(tables.len());
        let mut counts = Vec::with_capacity(tables.len());
        for t in tables {
            let adjusted = match adjust_table(t, adjustment.policy, adjustment.a) {
                Adjusted::Excluded => continue,
                Adjusted::Proportions(adj) => adj,
            };
            let (th, v) = adjustment.effect(t).expect("retained table");
            theta.push(th);
            sigma2.push(v);
            n_tilde.push(t.effective_size());
            counts.push(StudyCounts { table: *t, adjusted });
        }
        if theta.len() < 2 {
            return Err(MetaError::TooFewStudies { k: theta.len() });
        }
        Ok(Self {
            excluded: tables.len() - theta.len(),
            theta,
            sigma2,
            n_tilde,
            counts: Some(counts),
            adjustment: Some(adjustment),
        })
    }

    /// Sample from bare estimates and variances; effective sizes default to `1/sigma2`.
    pub fn from_estimates(theta: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        let n_tilde = sigma2.iter().map(|v| 1.0 / v).collect();
        Self::from_parts(theta, sigma2, n_tilde)
    }

    pub fn from_parts(theta: Vec<f64>, sigma2: Vec<f64>, n_tilde: Vec<f64>) -> Result<Self> {
        if theta.len() != sigma2.len() || theta.len() != n_tilde.len() {
            return Err(MetaError::InvalidInput("per-study vectors differ in length".into()));
        }
        if theta.len() < 2 {
            return Err(MetaError::TooFewStudies { k: theta.len() });
        }
        if sigma2.iter().chain(&n_tilde).any(|v| !(*v > 0.0 && v.is_finite()))
            || theta.iter().any(|t| !t.is_finite())
        {
            return Err(MetaError::InvalidInput(
                "estimates must be finite with positive variances and sizes".into(),
            ));
        }
        Ok(Self { theta, sigma2, n_tilde, counts: None, adjustment: None, excluded: 0 })
    }

    pub fn k(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn n_tilde(&self) -> &[f64] {
        &self.n_tilde
    }

    pub fn counts(&self) -> Option<&[StudyCounts]> {
        self.counts.as_deref()
    }

    pub fn adjustment(&self) -> Option<Adjustment> {
        self.adjustment
    }

    /// Number of double-zero tables dropped while building the sample.
    pub fn excluded(&self) -> usize {
        self.excluded
    }

    /// Same sample with every estimate negated (arms swapped).
    pub fn negated(&self) -> Self {
        let mut s = self.clone();
        for t in &mut s.theta {
            *t = -*t;
        }
        s
    }

    /// Same sample with the studies reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let pick = |v: &Vec<f64>| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            theta: pick(&self.theta),
            sigma2: pick(&self.sigma2),
            n_tilde: pick(&self.n_tilde),
            counts: self.counts.as_ref().map(|c| order.iter().map(|&i| c[i]).collect()),
            adjustment: self.adjustment,
            excluded: self.excluded,
        }
    }
}

/// A labelled study read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub study_id: String,
    pub table: StudyTable,
}

/// Reads `study_id,x_t,n_t,x_c,n_c` rows; errors carry 1-based line numbers.
pub fn read_studies_csv<R: Read>(reader: R) -> Result<Vec<StudyRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| MetaError::Parse { line: 1, message: e.to_string() })?
        .clone();
    let expected = ["study_id", "x_t", "n_t", "x_c", "n_c"];
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(MetaError::Parse {
            line: 1,
            message: format!("expected header `{}`", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| MetaError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| -> Result<u32> {
            rec[i].trim().parse::<u32>().map_err(|_| MetaError::Parse {
                line,
                message: format!("column `{}`: `{}` is not a nonnegative integer", expected[i], &rec[i]),
            })
        };
        let table = StudyTable::new(field(1)?, field(2)?, field(3)?, field(4)?)
            .map_err(|e| MetaError::Parse { line, message: e.to_string() })?;
        out.push(StudyRecord { study_id: rec[0].trim().to_string(), table });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(x_t: u32, n_t: u32, x_c: u32, n_c: u32) -> StudyTable {
        StudyTable::new(x_t, n_t, x_c, n_c).unwrap()
    }

    #[test]
    fn rejects_invalid_tables() {
        assert!(StudyTable::new(11, 10, 0, 10).is_err());
        assert!(StudyTable::new(0, 0, 0, 10).is_err());
    }

    #[test]
    fn adjust_no_zero_cell_keeps_ml_proportions() {
        let Adjusted::Proportions(a) = adjust_table(&t(10, 20, 5, 20), ZeroCellPolicy::StandardHalf, 0.5)
        else {
            panic!()
        };
        assert_eq!((a.p_t, a.p_c), (0.5, 0.25));
        assert_eq!((a.n_t_adj, a.n_c_adj), (20.0, 20.0));
    }

    #[test]
    fn adjust_single_zero_adds_half() {
        let Adjusted::Proportions(a) = adjust_table(&t(0, 10, 5, 10), ZeroCellPolicy::StandardHalf, 0.5)
        else {
            panic!()
        };
        assert!((a.p_t - 0.5 / 11.0).abs() < 1e-15);
        assert!((a.p_c - 5.5 / 11.0).abs() < 1e-15);
        assert_eq!(a.n_t_adj, 11.0);
    }

    #[test]
    fn double_zero_is_excluded_under_both_policies() {
        for p in [ZeroCellPolicy::StandardHalf, ZeroCellPolicy::AlwaysHalf] {
            assert_eq!(adjust_table(&t(0, 10, 0, 10), p, 0.5), Adjusted::Excluded);
            assert_eq!(adjust_table(&t(10, 10, 7, 7), p, 0.5), Adjusted::Excluded);
        }
        // Zero cells in different rows still identify the odds ratio.
        assert_ne!(adjust_table(&t(0, 10, 7, 7), ZeroCellPolicy::AlwaysHalf, 0.5), Adjusted::Excluded);
    }

    #[test]
    fn log_odds_ratio_examples() {
        assert_eq!(log_odds_ratio(0.25, 0.25).unwrap(), 0.0);
        assert!((log_odds_ratio(0.5, 0.25).unwrap() - 3f64.ln()).abs() < 1e-15);
        assert!((log_odds_ratio(0.25, 0.5).unwrap() + 3f64.ln()).abs() < 1e-15);
        assert_eq!(log_odds_ratio(0.0, 0.5), Err(MetaError::Domain(0.0)));
        assert!(log_odds_ratio(0.5, 1.0).is_err());
    }

    #[test]
    fn lor_variance_examples() {
        assert!((lor_variance(0.5, 20.0, 0.5, 20.0) - 0.4).abs() < 1e-15);
        assert!((lor_variance(0.5, 20.0, 0.25, 20.0) - (0.2 + 1.0 / 3.75)).abs() < 1e-15);
        let v = lor_variance(0.3, 50.0, 0.6, 70.0);
        assert!((lor_variance(0.3, 100.0, 0.6, 140.0) - v / 2.0).abs() < 1e-15);
    }

    #[test]
    fn build_sample_examples() {
        let tab = t(10, 20, 5, 20);
        let s = EffectSample::from_tables(&[tab, tab], ZeroCellPolicy::StandardHalf).unwrap();
        assert_eq!(s.k(), 2);
        for i in 0..2 {
            assert!((s.theta()[i] - 3f64.ln()).abs() < 1e-14);
            assert!((s.sigma2()[i] - 0.46666666666666667).abs() < 1e-14);
        }
        let tables = [t(3, 10, 4, 10), t(0, 10, 0, 10), t(5, 10, 2, 10), t(1, 10, 0, 10), t(6, 12, 6, 9)];
        let s = EffectSample::from_tables(&tables, ZeroCellPolicy::AlwaysHalf).unwrap();
        assert_eq!(s.k(), 4);
        assert_eq!(s.excluded(), 1);
        assert_eq!(s.n_tilde()[0], 5.0);
    }

    #[test]
    fn too_few_studies() {
        let tables = [t(0, 10, 0, 10), t(4, 10, 2, 10)];
        assert_eq!(
            EffectSample::from_tables(&tables, ZeroCellPolicy::StandardHalf),
            Err(MetaError::TooFewStudies { k: 1 })
        );
    }

    #[test]
    fn raw_denominator_toggle() {
        let tab = t(0, 10, 5, 10);
        let mut adj = Adjustment::new(ZeroCellPolicy::StandardHalf);
        let (_, v_adj) = adj.effect(&tab).unwrap();
        adj.denominator = VarianceDenominator::Raw;
        let (_, v_raw) = adj.effect(&tab).unwrap();
        let (pt, pc) = (0.5 / 11.0, 5.5 / 11.0);
        assert!((v_adj - lor_variance(pt, 11.0, pc, 11.0)).abs() < 1e-14);
        assert!((v_raw - lor_variance(pt, 10.0, pc, 10.0)).abs() < 1e-14);
    }

    #[test]
    fn csv_reader_reports_line_numbers() {
        let good = "study_id,x_t,n_t,x_c,n_c\na,1,10,2,10\nb,0,12,0,12\n";
        let recs = read_studies_csv(good.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].study_id, "b");
        let bad = "study_id,x_t,n_t,x_c,n_c\na,1,10,2,10\nb,x,12,0,12\n";
        match read_studies_csv(bad.as_bytes()) {
            Err(MetaError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let over = "study_id,x_t,n_t,x_c,n_c\na,11,10,2,10\n";
        assert!(matches!(read_studies_csv(over.as_bytes()), Err(MetaError::Parse { line: 2, .. })));
        assert!(matches!(read_studies_csv("id,a\n".as_bytes()), Err(MetaError::Parse { line: 1, .. })));
    }

    fn table_strategy() -> impl Strategy<Value = StudyTable> {
        (1u32..60, 1u32..60).prop_flat_map(|(nt, nc)| {
            (0..=nt, Just(nt), 0..=nc, Just(nc)).prop_map(|(a, b, c, d)| StudyTable::new(a, b, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn arm_swap_negates_effects(tables in prop::collection::vec(table_strategy(), 2..12)) {
            for policy in [ZeroCellPolicy::StandardHalf, ZeroCellPolicy::AlwaysHalf] {
                let swapped: Vec<_> = tables.iter().map(StudyTable::swap_arms).collect();
                let (a, b) = match (EffectSample::from_tables(&tables, policy), EffectSample::from_tables(&swapped, policy)) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(e1), Err(e2)) => { prop_assert_eq!(e1, e2); continue; }
                    _ => { prop_assert!(false, "exclusion differs under arm swap"); unreachable!() }
                };
                for i in 0..a.k() {
                    prop_assert!((a.theta()[i] + b.theta()[i]).abs() < 1e-12);
                    prop_assert!((a.sigma2()[i] - b.sigma2()[i]).abs() < 1e-12 * a.sigma2()[i]);
                    prop_assert_eq!(a.n_tilde()[i], b.n_tilde()[i]);
                }
            }
        }

        #[test]
        fn always_half_matches_cellwise_adjustment(tables in prop::collection::vec(table_strategy(), 2..12)) {
            let Ok(s) = EffectSample::from_tables(&tables, ZeroCellPolicy::AlwaysHalf) else { return Ok(()); };
            let kept: Vec<_> = tables.iter().filter(|t| !t.is_double_zero()).collect();
            prop_assert_eq!(kept.len(), s.k());
            for (i, t) in kept.iter().enumerate() {
                let pt = (t.x_t as f64 + 0.5) / (t.n_t as f64 + 1.0);
                let pc = (t.x_c as f64 + 0.5) / (t.n_c as f64 + 1.0);
                prop_assert!(pt > 0.0 && pt < 1.0 && pc > 0.0 && pc < 1.0);
                let th = (pt / (1.0 - pt)).ln() - (pc / (1.0 - pc)).ln();
                prop_assert!((s.theta()[i] - th).abs() < 1e-12);
            }
        }

        #[test]
        fn standard_half_keeps_ml_estimate_without_zero_cells(t in table_strategy()) {
            if !t.has_zero_cell() {
                let Adjusted::Proportions(a) = adjust_table(&t, ZeroCellPolicy::StandardHalf, 0.5) else { unreachable!() };
                prop_assert_eq!(a.p_t, t.x_t as f64 / t.n_t as f64);
                prop_assert_eq!(a.p_c, t.x_c as f64 / t.n_c as f64);
            }
        }
    }
}
