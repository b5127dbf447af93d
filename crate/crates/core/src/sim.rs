//! Deterministic Monte Carlo generator and sweep runner.
//!
//! Every replicate draws from its own ChaCha stream keyed by the run seed, a
//! hash of the cell parameters and the replicate index, so a replicate can be
//! regenerated alone and results do not depend on the worker count.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::analysis::{Analysis, Estimator, Quantity, Status};
use crate::error::{MetaError, Result};
use crate::study_data::{StudyTable, ZeroCellPolicy};

/// Unequal study-size base sets, tiled `k/5` times.
pub const UNEQUAL_BASE_SETS: [(u32, [u32; 5]); 4] = [
    (30, [12, 16, 18, 20, 84]),
    (60, [24, 32, 36, 40, 168]),
    (100, [64, 72, 76, 80, 208]),
    (160, [124, 132, 136, 140, 268]),
];

pub const DESIGN_K: [usize; 3] = [5, 10, 30];
pub const DESIGN_EQUAL_N: [u32; 4] = [40, 100, 250, 1000];
pub const DESIGN_UNEQUAL_N: [u32; 4] = [30, 60, 100, 160];
pub const DESIGN_Q: [f64; 2] = [0.5, 0.75];
pub const DESIGN_THETA: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];
pub const DESIGN_PC: [f64; 3] = [0.1, 0.2, 0.4];

/// `0, 0.1, …, 1`, optionally followed by `2, …, 10`.
pub fn design_tau2(extended: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    if extended {
        v.extend((2..=10).map(|i| i as f64));
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeScheme {
    /// Every study has total size `n`.
    Equal(u32),
    /// Tiled base set with mean size `n̄`.
    Unequal(u32),
}

impl SizeScheme {
    pub fn kind(&self) -> &'static str {
        match self {
            SizeScheme::Equal(_) => "equal",
            SizeScheme::Unequal(_) => "unequal",
        }
    }

    pub fn n(&self) -> u32 {
        match self {
            SizeScheme::Equal(n) | SizeScheme::Unequal(n) => *n,
        }
    }

    pub fn from_parts(kind: &str, n: u32) -> Result<Self> {
        match kind {
            "equal" => Ok(SizeScheme::Equal(n)),
            "unequal" => Ok(SizeScheme::Unequal(n)),
            other => Err(MetaError::InvalidInput(format!("unknown size scheme '{other}'"))),
        }
    }
}

/// Parameters identifying one simulation cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub k: usize,
    pub size_scheme: SizeScheme,
    pub q: f64,
    pub theta: f64,
    pub tau2: f64,
    pub p_c: f64,
}

impl CellKey {
    fn sort_key(&self) -> (usize, SizeScheme, [u64; 4]) {
        let ord = |x: f64| {
            let b = x.to_bits();
            if b >> 63 == 1 {
                !b
            } else {
                b | (1 << 63)
            }
        };
        (self.k, self.size_scheme, [ord(self.q), ord(self.theta), ord(self.tau2), ord(self.p_c)])
    }

    /// Stable 64-bit FNV-1a hash of the cell parameters.
    pub fn stable_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        feed(&(self.k as u64).to_le_bytes());
        feed(self.size_scheme.kind().as_bytes());
        feed(&self.size_scheme.n().to_le_bytes());
        for x in [self.q, self.theta, self.tau2, self.p_c] {
            feed(&x.to_bits().to_le_bytes());
        }
        h
    }
}

impl Eq for CellKey {}

impl Hash for CellKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.sort_key().hash(state)
    }
}

impl PartialOrd for CellKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CellKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "k={} {}({}) q={} theta={} tau2={} p_c={}",
            self.k,
            self.size_scheme.kind(),
            self.size_scheme.n(),
            self.q,
            self.theta,
            self.tau2,
            self.p_c
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub k: usize,
    pub size_scheme: SizeScheme,
    pub q: f64,
    pub theta: f64,
    pub tau2: f64,
    pub p_c: f64,
    pub replications: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn key(&self) -> CellKey {
        CellKey {
            k: self.k,
            size_scheme: self.size_scheme,
            q: self.q,
            theta: self.theta,
            tau2: self.tau2,
            p_c: self.p_c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MetaError::InvalidInput(m));
        if self.k < 2 {
            return bad(format!("k = {} is below 2", self.k));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad(format!("q = {} outside (0, 1)", self.q));
        }
        if !(self.p_c > 0.0 && self.p_c < 1.0) {
            return bad(format!("p_c = {} outside (0, 1)", self.p_c));
        }
        if !(self.tau2 >= 0.0 && self.tau2.is_finite()) || !self.theta.is_finite() {
            return bad(format!("invalid theta/tau2 ({}, {})", self.theta, self.tau2));
        }
        if self.replications == 0 {
            return bad("replications must be positive".into());
        }
        expand_sizes(self.size_scheme, self.k, self.q).map(|_| ())
    }

    /// Whether every parameter is on the published design menus.
    pub fn on_design_menu(&self) -> bool {
        let has = |set: &[f64], x: f64| set.iter().any(|v| (v - x).abs() < 1e-12);
        let sizes_ok = match self.size_scheme {
            SizeScheme::Equal(n) => DESIGN_EQUAL_N.contains(&n),
            SizeScheme::Unequal(n) => DESIGN_UNEQUAL_N.contains(&n),
        };
        DESIGN_K.contains(&self.k)
            && sizes_ok
            && has(&DESIGN_Q, self.q)
            && has(&DESIGN_THETA, self.theta)
            && has(&design_tau2(true), self.tau2)
            && has(&DESIGN_PC, self.p_c)
    }
}

/// The full factorial design: K × sizes × q × θ × τ² × p_c.
pub fn design_grid(extended_tau2: bool, replications: usize, seed: u64) -> Vec<SimConfig> {
    let schemes: Vec<SizeScheme> = DESIGN_EQUAL_N
        .iter()
        .map(|n| SizeScheme::Equal(*n))
        .chain(DESIGN_UNEQUAL_N.iter().map(|n| SizeScheme::Unequal(*n)))
        .collect();
    let mut grid = Vec::new();
    for &k in &DESIGN_K {
        for &size_scheme in &schemes {
            for &q in &DESIGN_Q {
                for &theta in &DESIGN_THETA {
                    for &tau2 in &design_tau2(extended_tau2) {
                        for &p_c in &DESIGN_PC {
                            grid.push(SimConfig { k, size_scheme, q, theta, tau2, p_c, replications, seed });
                        }
                    }
                }
            }
        }
    }
    grid
}

/// `(n_t, n_c)` per study with `n_t = ⌈(1 − q)·n⌉`.
pub fn expand_sizes(scheme: SizeScheme, k: usize, q: f64) -> Result<Vec<(u32, u32)>> {
    let split = |n: u32| {
        let n_t = ((1.0 - q) * n as f64 - 1e-9).ceil().max(0.0) as u32;
        (n_t, n - n_t)
    };
    let sizes: Vec<u32> = match scheme {
        SizeScheme::Equal(n) => vec![n; k],
        SizeScheme::Unequal(nbar) => {
            let base = UNEQUAL_BASE_SETS
                .iter()
                .find(|(m, _)| *m == nbar)
                .map(|(_, b)| b)
                .ok_or_else(|| MetaError::InvalidInput(format!("no unequal size set with mean {nbar}")))?;
            if k % 5 != 0 {
                return Err(MetaError::UnsupportedK(k));
            }
            base.iter().copied().cycle().take(k).collect()
        }
    };
    let out: Vec<(u32, u32)> = sizes.into_iter().map(split).collect();
    if out.iter().any(|&(t, c)| t == 0 || c == 0) {
        return Err(MetaError::InvalidInput(format!("{scheme:?} with q = {q} leaves an empty arm")));
    }
    Ok(out)
}

/// Treatment-arm event probability with log-odds-ratio `theta_i` against `p_c`.
pub fn treatment_prob(p_c: f64, theta_i: f64) -> f64 {
    let odds = p_c / (1.0 - p_c) * theta_i.exp();
    odds / (1.0 + odds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaSample {
    pub tables: Vec<StudyTable>,
    /// Latent study effects `θᵢ`.
    pub latent_theta: Vec<f64>,
}

/// Generator for replicate `rep` of `cfg`; independent of any other replicate.
pub fn replicate_rng(cfg: &SimConfig, rep: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&cfg.seed.to_le_bytes());
    key[8..16].copy_from_slice(&cfg.key().stable_hash().to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(rep);
    rng
}

pub fn generate_meta_sample(cfg: &SimConfig, rep: u64) -> Result<MetaSample> {
    let sizes = expand_sizes(cfg.size_scheme, cfg.k, cfg.q)?;
    let mut rng = replicate_rng(cfg, rep);
    let tau = cfg.tau2.sqrt();
    let mut tables = Vec::with_capacity(cfg.k);
    let mut latent_theta = Vec::with_capacity(cfg.k);
    for (n_t, n_c) in sizes {
        let z: f64 = rng.sample(StandardNormal);
        let theta_i = cfg.theta + tau * z;
        let x_c = draw_binomial(&mut rng, n_c, cfg.p_c)?;
        let x_t = draw_binomial(&mut rng, n_t, treatment_prob(cfg.p_c, theta_i))?;
        tables.push(StudyTable::new(x_t, n_t, x_c, n_c)?);
        latent_theta.push(theta_i);
    }
    Ok(MetaSample { tables, latent_theta })
}

fn draw_binomial<R: Rng>(rng: &mut R, n: u32, p: f64) -> Result<u32> {
    let d = Binomial::new(n as u64, p).map_err(|e| MetaError::InvalidInput(e.to_string()))?;
    Ok(d.sample(rng) as u32)
}

/// One value of one estimator in one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub cell: CellKey,
    pub policy: ZeroCellPolicy,
    pub rep: u64,
    pub estimator: Estimator,
    pub quantity: Quantity,
    /// `None` for NA.
    pub value: Option<f64>,
    pub status: Status,
}

pub const RAW_HEADER: [&str; 13] =
    ["k", "size_scheme", "n", "q", "theta", "tau2", "p_c", "policy", "rep", "method", "quantity", "value", "status"];

/// Runs one replicate through the roster.
pub fn simulate_replicate(cfg: &SimConfig, rep: u64, analysis: &Analysis) -> Result<Vec<RawRecord>> {
    let sample = generate_meta_sample(cfg, rep)?;
    let cell = cfg.key();
    let mut out = Vec::new();
    for row in analysis.run(&sample.tables) {
        for (quantity, value) in row.values() {
            out.push(RawRecord {
                cell,
                policy: row.policy,
                rep,
                estimator: row.estimator,
                quantity,
                value,
                status: row.status,
            });
        }
    }
    Ok(out)
}

/// Runs every cell of `grid` and hands each finished cell's records, in
/// canonical order, to `sink`. Replicates are spread over `workers` threads.
pub fn run_sweep_with<F>(grid: &[SimConfig], analysis: &Analysis, workers: usize, mut sink: F) -> Result<()>
where
    F: FnMut(&[RawRecord]) -> Result<()>,
{
    if grid.is_empty() {
        return Err(MetaError::InvalidInput("empty simulation grid".into()));
    }
    for cfg in grid {
        cfg.validate()?;
    }
    let mut roster = analysis.clone();
    roster.estimators.sort();
    roster.estimators.dedup();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| MetaError::InvalidInput(e.to_string()))?;
    for cfg in grid {
        let per_rep: Vec<Result<Vec<RawRecord>>> = pool.install(|| {
            (0..cfg.replications as u64)
                .into_par_iter()
                .map(|rep| simulate_replicate(cfg, rep, &roster))
                .collect()
        });
        let mut records = Vec::new();
        for r in per_rep {
            records.extend(r?);
        }
        sink(&records)?;
    }
    Ok(())
}

/// Collects [`run_sweep_with`] output in memory.
pub fn run_sweep(grid: &[SimConfig], analysis: &Analysis, workers: usize) -> Result<Vec<RawRecord>> {
    let mut all = Vec::new();
    run_sweep_with(grid, analysis, workers, |r| {
        all.extend_from_slice(r);
        Ok(())
    })?;
    Ok(all)
}

/// Writes records as CSV rows; values carry 17 significant digits.
pub struct RawWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RawWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(RAW_HEADER).map_err(csv_err)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, records: &[RawRecord]) -> Result<()> {
        for r in records {
            let value = r.value.map_or_else(|| "NA".to_string(), |v| format!("{v:.16e}"));
            self.inner
                .write_record([
                    r.cell.k.to_string(),
                    r.cell.size_scheme.kind().to_string(),
                    r.cell.size_scheme.n().to_string(),
                    r.cell.q.to_string(),
                    r.cell.theta.to_string(),
                    r.cell.tau2.to_string(),
                    r.cell.p_c.to_string(),
                    r.policy.as_str().to_string(),
                    r.rep.to_string(),
                    r.estimator.name().to_string(),
                    r.quantity.as_str().to_string(),
                    value,
                    r.status.as_str().to_string(),
                ])
                .map_err(csv_err)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| MetaError::Io(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> MetaError {
    MetaError::Io(e.to_string())
}

fn estimator_for(name: &str, quantity: Quantity) -> Option<Estimator> {
    Estimator::all().into_iter().find(|e| e.name() == name && e.quantities().contains(&quantity))
}

/// Parses a raw record CSV; any deviation from the schema is a `Schema` error.
pub fn read_raw_records<R: std::io::Read>(reader: R) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| MetaError::Schema(e.to_string()))?.clone();
    if headers.iter().ne(RAW_HEADER.iter().copied()) {
        return Err(MetaError::Schema(format!("expected header {}", RAW_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| MetaError::Schema(format!("line {line}: {e}")))?;
        let bad = |what: &str| MetaError::Schema(format!("line {line}: bad {what}"));
        let num = |idx: usize, what: &str| row[idx].parse::<f64>().map_err(|_| bad(what));
        let k: usize = row[0].parse().map_err(|_| bad("k"))?;
        let n: u32 = row[2].parse().map_err(|_| bad("n"))?;
        let size_scheme = SizeScheme::from_parts(&row[1], n).map_err(|_| bad("size_scheme"))?;
        let cell = CellKey {
            k,
            size_scheme,
            q: num(3, "q")?,
            theta: num(4, "theta")?,
            tau2: num(5, "tau2")?,
            p_c: num(6, "p_c")?,
        };
        let policy = ZeroCellPolicy::from_str(&row[7]).map_err(|_| bad("policy"))?;
        let rep: u64 = row[8].parse().map_err(|_| bad("rep"))?;
        let quantity = Quantity::from_str(&row[10]).map_err(|_| bad("quantity"))?;
        let estimator = estimator_for(&row[9], quantity).ok_or_else(|| bad("method"))?;
        let status = Status::from_str(&row[12]).map_err(|_| bad("status"))?;
        let value = match &row[11] {
            "NA" => None,
            v => Some(v.parse::<f64>().map_err(|_| bad("value"))?),
        };
        if value.is_none() != status.is_na() {
            return Err(bad("value/status pairing"));
        }
        out.push(RawRecord { cell, policy, rep, estimator, quantity, value, status });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tau_point::TauMethod;

    fn cfg(k: usize, scheme: SizeScheme, tau2: f64) -> SimConfig {
        SimConfig { k, size_scheme: scheme, q: 0.5, theta: 0.5, tau2, p_c: 0.2, replications: 10, seed: 11 }
    }

    #[test]
    fn size_expansion_examples() {
        let s = expand_sizes(SizeScheme::Unequal(30), 5, 0.5).unwrap();
        assert_eq!(s, vec![(6, 6), (8, 8), (9, 9), (10, 10), (42, 42)]);
        assert_eq!(expand_sizes(SizeScheme::Equal(40), 5, 0.75).unwrap(), vec![(10, 30); 5]);
        let s = expand_sizes(SizeScheme::Unequal(160), 10, 0.5).unwrap();
        let totals: Vec<u32> = s.iter().map(|(t, c)| t + c).collect();
        assert_eq!(totals, [124, 132, 136, 140, 268, 124, 132, 136, 140, 268]);
        assert_eq!(expand_sizes(SizeScheme::Unequal(30), 7, 0.5), Err(MetaError::UnsupportedK(7)));
        // ⌈0.25·30⌉ = 8 for the odd-split case.
        assert_eq!(expand_sizes(SizeScheme::Unequal(30), 5, 0.75).unwrap()[4], (21, 63));
        assert_eq!(expand_sizes(SizeScheme::Equal(30), 5, 0.75).unwrap()[0], (8, 22));
    }

    #[test]
    fn treatment_prob_examples() {
        assert_eq!(treatment_prob(0.3, 0.0), 0.3);
        assert!((treatment_prob(0.2, 2.0) - 0.6488).abs() < 5e-5);
        for &(p, t) in &[(0.1, 1.3), (0.4, -2.0), (0.2, 0.01)] {
            let p_t = treatment_prob(p, t);
            let lo = (p_t / (1.0 - p_t)).ln() - (p / (1.0 - p)).ln();
            assert!((lo - t).abs() < 1e-12);
        }
    }

    #[test]
    fn design_grid_size() {
        assert_eq!(design_grid(false, 1, 0).len(), 7_920);
        assert!(design_grid(false, 1, 0).iter().all(|c| c.on_design_menu() && c.validate().is_ok()));
    }

    #[test]
    fn generation_is_reproducible() {
        let c = cfg(10, SizeScheme::Equal(100), 0.3);
        let a = generate_meta_sample(&c, 4).unwrap();
        assert_eq!(a, generate_meta_sample(&c, 4).unwrap());
        assert_ne!(a, generate_meta_sample(&c, 5).unwrap());
        let fixed = generate_meta_sample(&cfg(5, SizeScheme::Equal(40), 0.0), 0).unwrap();
        assert!(fixed.latent_theta.iter().all(|t| *t == 0.5));
    }

    #[test]
    fn latent_effects_follow_the_normal_law() {
        let c = SimConfig { k: 10, tau2: 0.64, ..cfg(10, SizeScheme::Equal(40), 0.64) };
        let draws: Vec<f64> = (0..10_000).flat_map(|r| generate_meta_sample(&c, r).unwrap().latent_theta).collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((m - 0.5).abs() < 3.0 * 0.8 / (draws.len() as f64).sqrt());
    }

    #[test]
    fn double_zero_rate_matches_binomial() {
        let c = SimConfig { p_c: 0.1, theta: 0.0, ..cfg(5, SizeScheme::Equal(40), 0.0) };
        let reps = 20_000;
        let dz = (0..reps)
            .flat_map(|r| generate_meta_sample(&c, r).unwrap().tables)
            .filter(|t| t.is_double_zero())
            .count() as f64;
        let total = (reps * 5) as f64;
        let p = 0.9f64.powi(40);
        let rate = dz / total;
        assert!(rate > 0.0);
        assert!((rate - p).abs() < 4.0 * (p * (1.0 - p) / total).sqrt(), "{rate} vs {p}");
    }

    #[test]
    fn sweep_cardinality_and_worker_invariance() {
        let grid = [cfg(5, SizeScheme::Equal(40), 0.2)];
        let roster = Analysis::new(TauMethod::ALL.iter().map(|m| Estimator::TauPoint(*m)).collect());
        let one = run_sweep(&grid, &roster, 1).unwrap();
        assert_eq!(one.len(), 50);
        assert_eq!(one, run_sweep(&grid, &roster, 3).unwrap());
        let mut sorted = one.clone();
        sorted.sort_by_key(|r| (r.rep, r.estimator));
        assert_eq!(sorted, one);
    }

    #[test]
    fn csv_round_trip() {
        let grid = [cfg(5, SizeScheme::Unequal(30), 0.4)];
        let recs = run_sweep(&grid, &Analysis::new(Estimator::select_list("dl,kd,qp,ssw_kd").unwrap()), 1).unwrap();
        let mut w = RawWriter::new(Vec::new()).unwrap();
        w.write(&recs).unwrap();
        let bytes = w.finish().unwrap();
        assert_eq!(read_raw_records(bytes.as_slice()).unwrap(), recs);
        assert!(read_raw_records("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn lag_one_autocorrelation_small() {
        let c = SimConfig { replications: 400, ..cfg(5, SizeScheme::Equal(100), 0.2) };
        let recs = run_sweep(&[c], &Analysis::new(vec![Estimator::TauPoint(TauMethod::DL)]), 1).unwrap();
        let x: Vec<f64> = recs.iter().map(|r| r.value.unwrap()).collect();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
        let cov: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        assert!((cov / var).abs() < 3.0 / (x.len() as f64).sqrt());
    }
}
