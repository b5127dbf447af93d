//! One pass of a chosen estimator roster over a set of 2×2 tables.
//!
//! Each estimator builds its sample under its own zero-cell policy: the KD
//! family and SSW always add ½ to every cell, the others add ½ only to tables
//! with a zero cell. Intermediate τ² estimates are shared between the
//! estimators that need them.

use std::fmt;
use std::str::FromStr;

use crate::effect::{
    hksj_interval, iv_interval, iv_point, ssw_interval, ssw_point, ThetaIntervalMethod, ThetaMethod,
};
use crate::error::{MetaError, Result};
use crate::study_data::{EffectSample, StudyTable, ZeroCellPolicy};
use crate::tau_interval::{bj_interval, jackson_interval, kd_interval, pl_interval, qp_interval, TauIntervalMethod};
use crate::tau_point::{
    dl_estimate, jackson_estimate, kd_estimate, mp_estimate, reml_estimate, KdConfig, TauEstimate, TauMethod,
};

/// Any estimator of the roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    TauPoint(TauMethod),
    TauInterval(TauIntervalMethod),
    ThetaPoint(ThetaMethod),
    ThetaInterval(ThetaIntervalMethod),
}

impl Estimator {
    /// All 24 estimators in canonical order.
    pub fn all() -> Vec<Estimator> {
        let mut v: Vec<Estimator> = TauMethod::ALL.iter().map(|m| Estimator::TauPoint(*m)).collect();
        v.extend(TauIntervalMethod::ALL.iter().map(|m| Estimator::TauInterval(*m)));
        v.extend(ThetaMethod::ALL.iter().map(|m| Estimator::ThetaPoint(*m)));
        v.extend(ThetaIntervalMethod::ALL.iter().map(|m| Estimator::ThetaInterval(*m)));
        v
    }

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::TauPoint(m) => m.as_str(),
            Estimator::TauInterval(m) => m.as_str(),
            Estimator::ThetaPoint(m) => m.as_str(),
            Estimator::ThetaInterval(m) => m.as_str(),
        }
    }

    pub fn is_interval(&self) -> bool {
        matches!(self, Estimator::TauInterval(_) | Estimator::ThetaInterval(_))
    }

    pub fn targets_tau2(&self) -> bool {
        matches!(self, Estimator::TauPoint(_) | Estimator::TauInterval(_))
    }

    pub fn policy(&self) -> ZeroCellPolicy {
        use Estimator::*;
        let kd_family = matches!(
            self,
            TauPoint(TauMethod::KD)
                | TauInterval(TauIntervalMethod::KD)
                | ThetaPoint(ThetaMethod::IvKd | ThetaMethod::Ssw)
                | ThetaInterval(ThetaIntervalMethod::IvKd | ThetaIntervalMethod::HksjKd | ThetaIntervalMethod::SswKd)
        );
        if kd_family {
            ZeroCellPolicy::AlwaysHalf
        } else {
            ZeroCellPolicy::StandardHalf
        }
    }

    /// Record quantities produced by this estimator, in output order.
    pub fn quantities(&self) -> &'static [Quantity] {
        match self {
            Estimator::TauPoint(_) => &[Quantity::Tau2Point],
            Estimator::TauInterval(_) => &[Quantity::Tau2Lo, Quantity::Tau2Hi],
            Estimator::ThetaPoint(_) => &[Quantity::ThetaPoint],
            Estimator::ThetaInterval(_) => &[Quantity::ThetaLo, Quantity::ThetaHi],
        }
    }

    /// Resolve one selector (case-insensitive, `-` and `_` ignored). A name
    /// shared by a point and an interval estimator, such as `J` or `IV_DL`,
    /// selects both; `all` selects the whole roster.
    pub fn select(selector: &str) -> Result<Vec<Estimator>> {
        let norm = |s: &str| s.to_ascii_lowercase().replace(['_', '-'], "");
        let key = norm(selector.trim());
        if key == "all" {
            return Ok(Estimator::all());
        }
        let hits: Vec<Estimator> = Estimator::all().into_iter().filter(|e| norm(e.name()) == key).collect();
        if hits.is_empty() {
            Err(MetaError::InvalidInput(format!("unknown method '{selector}'")))
        } else {
            Ok(hits)
        }
    }

    /// Resolve a comma-separated selector list into a sorted, deduplicated roster.
    pub fn select_list(list: &str) -> Result<Vec<Estimator>> {
        let mut out = Vec::new();
        for part in list.split(',').filter(|p| !p.trim().is_empty()) {
            out.extend(Estimator::select(part)?);
        }
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(MetaError::InvalidInput("no methods selected".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quantity {
    Tau2Point,
    Tau2Lo,
    Tau2Hi,
    ThetaPoint,
    ThetaLo,
    ThetaHi,
}

impl Quantity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Quantity::Tau2Point => "tau2_point",
            Quantity::Tau2Lo => "tau2_lo",
            Quantity::Tau2Hi => "tau2_hi",
            Quantity::ThetaPoint => "theta_point",
            Quantity::ThetaLo => "theta_lo",
            Quantity::ThetaHi => "theta_hi",
        }
    }
}

impl FromStr for Quantity {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tau2_point" => Quantity::Tau2Point,
            "tau2_lo" => Quantity::Tau2Lo,
            "tau2_hi" => Quantity::Tau2Hi,
            "theta_point" => Quantity::ThetaPoint,
            "theta_lo" => Quantity::ThetaLo,
            "theta_hi" => Quantity::ThetaHi,
            other => return Err(MetaError::Schema(format!("unknown quantity '{other}'"))),
        })
    }
}

/// Outcome code attached to every value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Status {
    Ok,
    /// τ² estimate or interval endpoint stopped at the search cap.
    Capped,
    NaTooFewStudies,
    NaNonConvergence,
    NaMissingCounts,
    NaError,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Capped => "capped",
            Status::NaTooFewStudies => "na_too_few_studies",
            Status::NaNonConvergence => "na_nonconvergence",
            Status::NaMissingCounts => "na_missing_counts",
            Status::NaError => "na_error",
        }
    }

    pub fn is_na(&self) -> bool {
        !matches!(self, Status::Ok | Status::Capped)
    }

    fn from_error(e: &MetaError) -> Status {
        match e {
            MetaError::TooFewStudies { .. } => Status::NaTooFewStudies,
            MetaError::NonConvergence { .. } => Status::NaNonConvergence,
            MetaError::MissingCounts => Status::NaMissingCounts,
            _ => Status::NaError,
        }
    }
}

impl FromStr for Status {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ok" => Status::Ok,
            "capped" => Status::Capped,
            "na_too_few_studies" => Status::NaTooFewStudies,
            "na_nonconvergence" => Status::NaNonConvergence,
            "na_missing_counts" => Status::NaMissingCounts,
            "na_error" => Status::NaError,
            other => return Err(MetaError::Schema(format!("unknown status '{other}'"))),
        })
    }
}

/// Point value or interval from one estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Summary {
    Point(f64),
    Interval { lower: f64, upper: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub estimator: Estimator,
    pub policy: ZeroCellPolicy,
    /// Studies retained under the estimator's policy.
    pub k_used: usize,
    pub status: Status,
    /// `None` exactly when `status` is an NA code.
    pub summary: Option<Summary>,
}

impl EstimateRow {
    /// `(quantity, value)` pairs; NA rows yield `None` values.
    pub fn values(&self) -> Vec<(Quantity, Option<f64>)> {
        let qs = self.estimator.quantities();
        match self.summary {
            Some(Summary::Point(v)) => vec![(qs[0], Some(v))],
            Some(Summary::Interval { lower, upper }) => vec![(qs[0], Some(lower)), (qs[1], Some(upper))],
            None => qs.iter().map(|q| (*q, None)).collect(),
        }
    }
}

/// Roster configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub estimators: Vec<Estimator>,
    pub kd: KdConfig,
    pub level: f64,
    /// Forces one zero-cell policy on every estimator instead of the roster's.
    pub policy: Option<ZeroCellPolicy>,
}

impl Default for Analysis {
    fn default() -> Self {
        Self { estimators: Estimator::all(), kd: KdConfig::default(), level: 0.95, policy: None }
    }
}

/// Samples and τ² estimates computed on demand for one set of tables.
struct Workspace<'a> {
    tables: &'a [StudyTable],
    kd: &'a KdConfig,
    policy: Option<ZeroCellPolicy>,
    standard: Option<Result<EffectSample>>,
    always: Option<Result<EffectSample>>,
    tau: [Option<Result<TauEstimate>>; 5],
}

impl<'a> Workspace<'a> {
    fn sample(&mut self, policy: ZeroCellPolicy) -> Result<&EffectSample> {
        let tables = self.tables;
        let slot = match policy {
            ZeroCellPolicy::StandardHalf => &mut self.standard,
            ZeroCellPolicy::AlwaysHalf => &mut self.always,
        };
        slot.get_or_insert_with(|| EffectSample::from_tables(tables, policy)).as_ref().map_err(Clone::clone)
    }

    fn tau(&mut self, method: TauMethod) -> Result<TauEstimate> {
        let idx = TauMethod::ALL.iter().position(|m| *m == method).unwrap_or(0);
        if let Some(r) = &self.tau[idx] {
            return r.clone();
        }
        let policy = self.policy.unwrap_or(Estimator::TauPoint(method).policy());
        let kd = self.kd;
        let r = self.sample(policy).and_then(|s| match method {
            TauMethod::DL => Ok(dl_estimate(s)),
            TauMethod::REML => Ok(reml_estimate(s)),
            TauMethod::MP => Ok(mp_estimate(s)),
            TauMethod::J => Ok(jackson_estimate(s)),
            TauMethod::KD => kd_estimate(s, kd),
        });
        self.tau[idx] = Some(r.clone());
        r
    }
}

fn iv_tau_method(m: ThetaMethod) -> Option<TauMethod> {
    match m {
        ThetaMethod::IvDl => Some(TauMethod::DL),
        ThetaMethod::IvReml => Some(TauMethod::REML),
        ThetaMethod::IvMp => Some(TauMethod::MP),
        ThetaMethod::IvJ => Some(TauMethod::J),
        ThetaMethod::IvKd => Some(TauMethod::KD),
        ThetaMethod::Ssw => None,
    }
}

fn interval_tau_method(m: ThetaIntervalMethod) -> TauMethod {
    match m {
        ThetaIntervalMethod::HksjDl => TauMethod::DL,
        ThetaIntervalMethod::HksjKd | ThetaIntervalMethod::SswKd => TauMethod::KD,
        other => other.iv_counterpart().and_then(iv_tau_method).unwrap_or(TauMethod::DL),
    }
}

impl Analysis {
    pub fn new(estimators: Vec<Estimator>) -> Self {
        Self { estimators, ..Self::default() }
    }

    /// Zero-cell policy the estimator runs under.
    pub fn policy_for(&self, estimator: Estimator) -> ZeroCellPolicy {
        self.policy.unwrap_or(estimator.policy())
    }

    /// Run every configured estimator; failures become NA rows.
    pub fn run(&self, tables: &[StudyTable]) -> Vec<EstimateRow> {
        let mut ws = Workspace {
            tables,
            kd: &self.kd,
            policy: self.policy,
            standard: None,
            always: None,
            tau: Default::default(),
        };
        let retained = tables.iter().filter(|t| !t.is_double_zero()).count();
        self.estimators
            .iter()
            .map(|&estimator| {
                let (status, summary) = match self.evaluate(&mut ws, estimator) {
                    Ok((summary, capped)) => (if capped { Status::Capped } else { Status::Ok }, Some(summary)),
                    Err(e) => (Status::from_error(&e), None),
                };
                EstimateRow { estimator, policy: self.policy_for(estimator), k_used: retained, status, summary }
            })
            .collect()
    }

    fn evaluate(&self, ws: &mut Workspace<'_>, estimator: Estimator) -> Result<(Summary, bool)> {
        let level = self.level;
        let policy = self.policy_for(estimator);
        match estimator {
            Estimator::TauPoint(m) => {
                let e = ws.tau(m)?;
                Ok((Summary::Point(e.value), !e.converged))
            }
            Estimator::TauInterval(m) => {
                let kd = ws.kd;
                let s = ws.sample(policy)?;
                let ci = match m {
                    TauIntervalMethod::QP => qp_interval(s, level),
                    TauIntervalMethod::BJ => bj_interval(s, level),
                    TauIntervalMethod::J => jackson_interval(s, level),
                    TauIntervalMethod::PL => pl_interval(s, level),
                    TauIntervalMethod::KD => kd_interval(s, kd, level),
                }?;
                Ok((Summary::Interval { lower: ci.lower, upper: ci.upper }, ci.open_upper))
            }
            Estimator::ThetaPoint(m) => {
                let tau2 = match iv_tau_method(m) {
                    Some(tm) => Some(ws.tau(tm)?.value),
                    None => None,
                };
                let s = ws.sample(policy)?;
                let e = match tau2 {
                    Some(t) => iv_point(s, t, m)?,
                    None => ssw_point(s),
                };
                Ok((Summary::Point(e.value), false))
            }
            Estimator::ThetaInterval(m) => {
                if level != 0.95 {
                    return Err(MetaError::InvalidInput("θ intervals are fixed at the 95% level".into()));
                }
                let tau2 = ws.tau(interval_tau_method(m))?.value;
                let s = ws.sample(policy)?;
                let ci = match m {
                    ThetaIntervalMethod::HksjDl | ThetaIntervalMethod::HksjKd => hksj_interval(s, tau2, m),
                    ThetaIntervalMethod::SswKd => ssw_interval(s, tau2),
                    _ => iv_interval(s, tau2, m),
                }?;
                Ok((Summary::Interval { lower: ci.lower(), upper: ci.upper() }, false))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tau_point::TAU2_MAX;

    fn tables(raw: &[(u32, u32, u32, u32)]) -> Vec<StudyTable> {
        raw.iter().map(|&(a, b, c, d)| StudyTable::new(a, b, c, d).unwrap()).collect()
    }

    #[test]
    fn selectors() {
        assert_eq!(Estimator::select("ssw_kd").unwrap(), vec![Estimator::ThetaInterval(ThetaIntervalMethod::SswKd)]);
        assert_eq!(Estimator::select("j").unwrap().len(), 2);
        assert_eq!(Estimator::select("IV-DL").unwrap().len(), 2);
        assert_eq!(Estimator::select_list("dl,DL,all").unwrap().len(), 24);
        assert!(Estimator::select("foo").is_err());
        let roster = Estimator::select_list("ssw,kd").unwrap();
        assert!(roster.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn policy_roster() {
        assert_eq!(Estimator::TauPoint(TauMethod::DL).policy(), ZeroCellPolicy::StandardHalf);
        assert_eq!(Estimator::TauInterval(TauIntervalMethod::KD).policy(), ZeroCellPolicy::AlwaysHalf);
        assert_eq!(Estimator::ThetaPoint(ThetaMethod::Ssw).policy(), ZeroCellPolicy::AlwaysHalf);
        assert_eq!(Estimator::ThetaInterval(ThetaIntervalMethod::HksjDl).policy(), ZeroCellPolicy::StandardHalf);
    }

    #[test]
    fn full_roster_runs() {
        let t = tables(&[(12, 50, 5, 50), (30, 50, 6, 50), (8, 50, 7, 50), (25, 50, 4, 50), (3, 50, 9, 50)]);
        let rows = Analysis::default().run(&t);
        assert_eq!(rows.len(), 24);
        for r in &rows {
            assert!(!r.status.is_na(), "{r:?}");
            match r.summary.unwrap() {
                Summary::Point(v) => assert!(v.is_finite()),
                Summary::Interval { lower, upper } => {
                    assert!(lower <= upper);
                    assert!(!r.estimator.targets_tau2() || (lower >= 0.0 && upper <= TAU2_MAX));
                }
            }
        }
        let n_values: usize = rows.iter().map(|r| r.values().len()).sum();
        assert_eq!(n_values, 5 + 10 + 6 + 16);
    }

    #[test]
    fn double_zero_leaves_too_few_studies() {
        let t = tables(&[(0, 20, 0, 20), (3, 20, 5, 20)]);
        let rows = Analysis::default().run(&t);
        assert!(rows.iter().all(|r| r.status == Status::NaTooFewStudies && r.summary.is_none()));
        assert_eq!(rows[0].values(), vec![(Quantity::Tau2Point, None)]);
    }

    #[test]
    fn shared_tau_estimates_agree_with_direct_calls() {
        let t = tables(&[(2, 30, 0, 30), (9, 40, 4, 40), (5, 25, 6, 25)]);
        let rows = Analysis::new(Estimator::select_list("dl,iv_dl").unwrap()).run(&t);
        let s = EffectSample::from_tables(&t, ZeroCellPolicy::StandardHalf).unwrap();
        let dl = dl_estimate(&s).value;
        assert_eq!(rows[0].summary, Some(Summary::Point(dl)));
        let iv = iv_point(&s, dl, ThetaMethod::IvDl).unwrap().value;
        assert_eq!(rows[1].summary, Some(Summary::Point(iv)));
    }
}
