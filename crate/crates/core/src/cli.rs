//! The `lor-meta` command line: `analyze`, `simulate` and `report`.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input (bad CSV, schema
//! mismatch, off-menu grid values, empty raw file), 3 fewer than two usable
//! studies.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::analysis::{Analysis, EstimateRow, Estimator, Summary};
use crate::error::{MetaError, Result};
use crate::metrics::{aggregate, emit_panels, PanelLayout};
use crate::sim::{
    design_tau2, read_raw_records, run_sweep_with, RawWriter, SimConfig, SizeScheme, DESIGN_EQUAL_N, DESIGN_K,
    DESIGN_PC, DESIGN_Q, DESIGN_THETA, DESIGN_UNEQUAL_N,
};
use crate::study_data::{read_studies_csv, StudyTable, ZeroCellPolicy};

#[derive(Debug, Parser)]
#[command(name = "lor-meta", version, about = "Random-effects meta-analysis of odds ratios")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the estimator roster on a CSV of 2x2 tables (study_id,x_t,n_t,x_c,n_c).
    Analyze(AnalyzeArgs),
    /// Monte Carlo sweep over a factorial grid; writes raw replicate records.
    Simulate(SimulateArgs),
    /// Aggregate raw records into per-figure panel CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    /// Each estimator's own policy.
    Roster,
    StandardHalf,
    AlwaysHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Equal,
    Unequal,
}

#[derive(Debug, clap::Args)]
pub struct AnalyzeArgs {
    /// Study CSV.
    pub input: PathBuf,
    /// Comma-separated estimator names, or `all`.
    #[arg(long, default_value = "all")]
    pub methods: String,
    #[arg(long, value_enum, default_value_t = PolicyArg::Roster)]
    pub policy: PolicyArg,
    /// Also write the table as CSV here (with a `.manifest` alongside).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// Raw record CSV to write; the manifest goes to `<out>.manifest`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Size schemes. Without this flag each n goes to the scheme(s) whose menu lists it.
    #[arg(long = "size-scheme", value_enum, value_delimiter = ',')]
    pub size_scheme: Option<Vec<SchemeArg>>,
    /// Study size (equal) or mean study size (unequal).
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<u32>>,
    /// Control-arm share of each study.
    #[arg(long, value_delimiter = ',')]
    pub q: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub theta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub tau2: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub pc: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10_000)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "all")]
    pub methods: String,
    /// Default τ² menu extends to 2..10 in steps of 1.
    #[arg(long)]
    pub extended_tau2: bool,
    /// Accept values outside the published design menus.
    #[arg(long)]
    pub allow_custom: bool,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Raw record CSV from `simulate`.
    pub input: PathBuf,
    /// Directory for the panel CSVs and `manifest.txt`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let invocation = args.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>().join(" ");
    let result = match cli.command {
        Command::Analyze(a) => analyze(&a, &invocation),
        Command::Simulate(a) => simulate(&a, &invocation),
        Command::Report(a) => report(&a, &invocation),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &MetaError) -> i32 {
    match e {
        MetaError::TooFewStudies { .. } => 3,
        MetaError::Io(_) => 1,
        _ => 2,
    }
}

fn write_manifest(path: &Path, command: &str, invocation: &str, extra: &[(&str, String)]) -> Result<()> {
    let mut text = format!("version={}\ncommand={command}\ninvocation={invocation}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in extra {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

const TABLE_HEADER: [&str; 9] = ["method", "target", "kind", "policy", "k", "status", "estimate", "lower", "upper"];

fn row_fields(r: &EstimateRow, fmt: impl Fn(f64) -> String) -> [String; 9] {
    let (est, lo, hi) = match r.summary {
        Some(Summary::Point(v)) => (fmt(v), String::new(), String::new()),
        Some(Summary::Interval { lower, upper }) => (String::new(), fmt(lower), fmt(upper)),
        None => ("NA".into(), String::new(), String::new()),
    };
    [
        r.estimator.name().to_string(),
        if r.estimator.targets_tau2() { "tau2" } else { "theta" }.to_string(),
        if r.estimator.is_interval() { "interval" } else { "point" }.to_string(),
        r.policy.as_str().to_string(),
        r.k_used.to_string(),
        r.status.as_str().to_string(),
        est,
        lo,
        hi,
    ]
}

fn analyze(args: &AnalyzeArgs, invocation: &str) -> Result<()> {
    let file = File::open(&args.input)
        .map_err(|e| MetaError::InvalidInput(format!("{}: {e}", args.input.display())))?;
    let records = read_studies_csv(BufReader::new(file))?;
    let tables: Vec<StudyTable> = records.iter().map(|r| r.table).collect();
    let retained = tables.iter().filter(|t| !t.is_double_zero()).count();
    let excluded = tables.len() - retained;
    println!("studies read: {}  retained: k = {retained}  double-zero excluded: {excluded}", tables.len());
    if retained < 2 {
        return Err(MetaError::TooFewStudies { k: retained });
    }
    let mut analysis = Analysis::new(Estimator::select_list(&args.methods)?);
    analysis.policy = match args.policy {
        PolicyArg::Roster => None,
        PolicyArg::StandardHalf => Some(ZeroCellPolicy::StandardHalf),
        PolicyArg::AlwaysHalf => Some(ZeroCellPolicy::AlwaysHalf),
    };
    let rows = analysis.run(&tables);

    let text_rows: Vec<[String; 9]> = rows.iter().map(|r| row_fields(r, |v| format!("{v:.6}"))).collect();
    let mut widths = TABLE_HEADER.map(str::len);
    for r in &text_rows {
        for (w, f) in widths.iter_mut().zip(r) {
            *w = (*w).max(f.len());
        }
    }
    let line = |fields: &[&str]| {
        let cells: Vec<String> = fields.iter().zip(&widths).map(|(f, w)| format!("{f:<w$}")).collect();
        println!("{}", cells.join("  ").trim_end());
    };
    line(&TABLE_HEADER);
    for r in &text_rows {
        line(&r.iter().map(String::as_str).collect::<Vec<_>>());
    }

    if let Some(out) = &args.out {
        let mut w = csv::Writer::from_path(out).map_err(|e| MetaError::Io(e.to_string()))?;
        w.write_record(TABLE_HEADER).map_err(|e| MetaError::Io(e.to_string()))?;
        for r in &rows {
            w.write_record(row_fields(r, |v| format!("{v:.16e}"))).map_err(|e| MetaError::Io(e.to_string()))?;
        }
        w.flush()?;
        write_manifest(
            &with_suffix(out, ".manifest"),
            "analyze",
            invocation,
            &[
                ("input", args.input.display().to_string()),
                ("methods", join(&analysis.estimators.iter().map(|e| e.name()).collect::<Vec<_>>())),
                ("studies", tables.len().to_string()),
                ("k", retained.to_string()),
            ],
        )?;
    }
    Ok(())
}

/// Cross product of the grid flags, with the published menus as defaults.
pub fn build_grid(args: &SimulateArgs) -> Result<Vec<SimConfig>> {
    let ks = args.k.clone().unwrap_or_else(|| DESIGN_K.to_vec());
    let qs = args.q.clone().unwrap_or_else(|| DESIGN_Q.to_vec());
    let thetas = args.theta.clone().unwrap_or_else(|| DESIGN_THETA.to_vec());
    let tau2s = args.tau2.clone().unwrap_or_else(|| design_tau2(args.extended_tau2));
    let pcs = args.pc.clone().unwrap_or_else(|| DESIGN_PC.to_vec());

    let mut schemes = Vec::new();
    match (&args.size_scheme, &args.n) {
        (Some(kinds), ns) => {
            for kind in kinds {
                let menu: &[u32] = if *kind == SchemeArg::Equal { &DESIGN_EQUAL_N } else { &DESIGN_UNEQUAL_N };
                for &n in ns.as_deref().unwrap_or(menu) {
                    schemes.push(match kind {
                        SchemeArg::Equal => SizeScheme::Equal(n),
                        SchemeArg::Unequal => SizeScheme::Unequal(n),
                    });
                }
            }
        }
        (None, Some(ns)) => {
            for &n in ns {
                let before = schemes.len();
                if DESIGN_EQUAL_N.contains(&n) {
                    schemes.push(SizeScheme::Equal(n));
                }
                if DESIGN_UNEQUAL_N.contains(&n) {
                    schemes.push(SizeScheme::Unequal(n));
                }
                if schemes.len() == before {
                    schemes.push(SizeScheme::Equal(n));
                }
            }
        }
        (None, None) => {
            schemes.extend(DESIGN_EQUAL_N.iter().map(|&n| SizeScheme::Equal(n)));
            schemes.extend(DESIGN_UNEQUAL_N.iter().map(|&n| SizeScheme::Unequal(n)));
        }
    }

    let mut grid = Vec::new();
    for &k in &ks {
        for &size_scheme in &schemes {
            for &q in &qs {
                for &theta in &thetas {
                    for &tau2 in &tau2s {
                        for &p_c in &pcs {
                            let cfg = SimConfig {
                                k,
                                size_scheme,
                                q,
                                theta,
                                tau2,
                                p_c,
                                replications: args.reps,
                                seed: args.seed,
                            };
                            cfg.validate()?;
                            if !args.allow_custom && !cfg.on_design_menu() {
                                return Err(MetaError::InvalidInput(format!(
                                    "cell {} is off the design menus; pass --allow-custom to run it",
                                    cfg.key()
                                )));
                            }
                            grid.push(cfg);
                        }
                    }
                }
            }
        }
    }
    if grid.is_empty() {
        return Err(MetaError::InvalidInput("empty simulation grid".into()));
    }
    grid.sort_by_key(|c| c.key());
    grid.dedup_by_key(|c| c.key());
    Ok(grid)
}

fn simulate(args: &SimulateArgs, invocation: &str) -> Result<()> {
    let grid = build_grid(args)?;
    let analysis = Analysis::new(Estimator::select_list(&args.methods)?);
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let file = File::create(&args.out)?;
    let mut writer = RawWriter::new(BufWriter::new(file))?;
    let mut count = 0usize;
    run_sweep_with(&grid, &analysis, workers, |records| {
        count += records.len();
        writer.write(records)
    })?;
    writer.finish()?.flush()?;

    let sizes: Vec<String> = {
        let mut s: Vec<SizeScheme> = grid.iter().map(|c| c.size_scheme).collect();
        s.sort();
        s.dedup();
        s.iter().map(|x| format!("{}:{}", x.kind(), x.n())).collect()
    };
    let distinct = |f: fn(&SimConfig) -> f64| {
        let mut v: Vec<f64> = grid.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        join(&v)
    };
    let mut ks: Vec<usize> = grid.iter().map(|c| c.k).collect();
    ks.sort();
    ks.dedup();
    write_manifest(
        &with_suffix(&args.out, ".manifest"),
        "simulate",
        invocation,
        &[
            ("seed", args.seed.to_string()),
            ("reps", args.reps.to_string()),
            ("workers", workers.to_string()),
            ("methods", join(&analysis.estimators.iter().map(|e| e.name()).collect::<Vec<_>>())),
            ("k", join(&ks)),
            ("sizes", sizes.join(",")),
            ("q", distinct(|c| c.q)),
            ("theta", distinct(|c| c.theta)),
            ("tau2", distinct(|c| c.tau2)),
            ("p_c", distinct(|c| c.p_c)),
            ("cells", grid.len().to_string()),
            ("records", count.to_string()),
            ("output", args.out.display().to_string()),
        ],
    )?;
    println!("{} cells x {} replicates: {count} records written to {}", grid.len(), args.reps, args.out.display());
    Ok(())
}

fn report(args: &ReportArgs, invocation: &str) -> Result<()> {
    let file = File::open(&args.input)
        .map_err(|e| MetaError::InvalidInput(format!("{}: {e}", args.input.display())))?;
    let records = read_raw_records(BufReader::new(file))?;
    if records.is_empty() {
        return Err(MetaError::Schema(format!("{} holds no records", args.input.display())));
    }
    let metrics = aggregate(&records)?;
    let paths = emit_panels(&metrics, &PanelLayout::default(), &args.out_dir)?;
    if paths.is_empty() {
        println!("no metrics to report; no panel files written");
        return Ok(());
    }
    write_manifest(
        &args.out_dir.join("manifest.txt"),
        "report",
        invocation,
        &[
            ("input", args.input.display().to_string()),
            ("records", records.len().to_string()),
            ("metrics", metrics.len().to_string()),
            ("panel_files", paths.len().to_string()),
        ],
    )?;
    println!("{} metrics in {} panel files under {}", metrics.len(), paths.len(), args.out_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim_args(extra: &[&str]) -> SimulateArgs {
        let mut argv = vec!["lor-meta", "simulate", "--out", "x.csv"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Simulate(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn default_grid_is_the_full_design() {
        assert_eq!(build_grid(&sim_args(&[])).unwrap().len(), 7920);
    }

    #[test]
    fn grid_flags_cross_product() {
        let a = sim_args(&["--k", "5", "--n", "250", "--q", "0.5", "--theta", "0", "--tau2", "0,0.5,1", "--pc", "0.1"]);
        let g = build_grid(&a).unwrap();
        assert_eq!(g.len(), 3);
        assert!(g.iter().all(|c| c.size_scheme == SizeScheme::Equal(250)));
        // 100 is on both size menus.
        let a = sim_args(&["--k", "5", "--n", "100", "--theta", "0", "--tau2", "0", "--pc", "0.1", "--q", "0.5"]);
        assert_eq!(build_grid(&a).unwrap().len(), 2);
        let a = sim_args(&["--k", "10", "--size-scheme", "unequal", "--theta", "-0.5,0", "--tau2", "0", "--pc", "0.1", "--allow-custom"]);
        assert_eq!(build_grid(&a).unwrap().len(), 4 * 2 * 2);
    }

    #[test]
    fn off_menu_values_need_allow_custom() {
        let a = sim_args(&["--k", "7", "--n", "40", "--q", "0.5", "--theta", "0", "--tau2", "0", "--pc", "0.1"]);
        assert_eq!(exit_code(&build_grid(&a).unwrap_err()), 2);
        let a = sim_args(&["--k", "7", "--n", "40", "--q", "0.5", "--theta", "0", "--tau2", "0", "--pc", "0.1", "--allow-custom"]);
        assert_eq!(build_grid(&a).unwrap().len(), 1);
        let a = sim_args(&["--k", "7", "--size-scheme", "unequal", "--n", "30", "--allow-custom"]);
        assert!(matches!(build_grid(&a), Err(MetaError::UnsupportedK(7))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&MetaError::TooFewStudies { k: 1 }), 3);
        assert_eq!(exit_code(&MetaError::Parse { line: 3, message: "x".into() }), 2);
        assert_eq!(exit_code(&MetaError::Io("x".into())), 1);
        assert_eq!(run(["lor-meta", "bogus"]), 2);
    }
}
