use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lor_meta::analysis::{Analysis, Estimator};
use lor_meta::metrics::{aggregate, emit_panels, PanelLayout};
use lor_meta::sim::{read_raw_records, run_sweep, SimConfig, SizeScheme};

fn lor_meta(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lor-meta")).args(args).current_dir(dir).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn analyze_two_equal_variance_studies() {
    let dir = tempfile::tempdir().unwrap();
    // Mirror-image tables share one variance.
    write(dir.path(), "s.csv", "study_id,x_t,n_t,x_c,n_c\nA,10,50,5,50\nB,5,50,10,50\n");
    let o = lor_meta(&["analyze", "s.csv", "--out", "t.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("retained: k = 2"));
    let rows = csv_rows(&dir.path().join("t.csv"));
    assert_eq!(rows.len(), Estimator::all().len());
    let point = |name: &str| -> f64 {
        let r = rows.iter().find(|r| r[0] == name && r[1] == "tau2" && r[2] == "point").unwrap();
        r[6].parse().unwrap()
    };
    assert!(point("DL") > 0.0);
    assert!((point("DL") - point("MP")).abs() < 1e-8);
    let manifest = fs::read_to_string(dir.path().join("t.csv.manifest")).unwrap();
    assert!(manifest.contains("command=analyze") && manifest.contains("k=2"));
}

#[test]
fn analyze_reports_double_zero_exclusion() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "s.csv", "study_id,x_t,n_t,x_c,n_c\nA,3,30,1,30\nB,0,25,0,25\nC,7,40,2,40\nD,4,20,4,20\n");
    let o = lor_meta(&["analyze", "s.csv", "--methods", "DL,IV_DL"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("studies read: 4  retained: k = 3  double-zero excluded: 1"), "{out}");
    let data: Vec<&str> = out.lines().skip(2).collect();
    assert_eq!(data.len(), 3);
    assert!(data.iter().all(|l| l.split_whitespace().nth(4) == Some("3")));
}

#[test]
fn analyze_method_filter_and_policy() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "s.csv", "study_id,x_t,n_t,x_c,n_c\nA,3,30,1,30\nB,0,25,2,25\nC,7,40,2,40\n");
    let o = lor_meta(&["analyze", "s.csv", "--methods=ssw_kd", "--out", "t.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let rows = csv_rows(&dir.path().join("t.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "SSW_KD");

    let o = lor_meta(&["analyze", "s.csv", "--methods", "DL", "--policy", "always-half", "--out", "a.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("a.csv"));
    assert_eq!(rows[0][3], "always_half");

    let o = lor_meta(&["analyze", "s.csv", "--methods", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.csv", "study_id,x_t,n_t,x_c,n_c\nA,3,30,1,30\nB,x,25,2,25\n");
    let o = lor_meta(&["analyze", "bad.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    write(dir.path(), "over.csv", "study_id,x_t,n_t,x_c,n_c\nA,31,30,1,30\n");
    let o = lor_meta(&["analyze", "over.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"));

    write(dir.path(), "few.csv", "study_id,x_t,n_t,x_c,n_c\nA,3,30,1,30\nB,0,25,0,25\n");
    let o = lor_meta(&["analyze", "few.csv"], dir.path());
    assert_eq!(o.status.code(), Some(3));

    let o = lor_meta(&["analyze", "missing.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_cardinality_manifest_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str, workers: &'static str| {
        vec![
            "simulate", "--k", "5", "--n", "250", "--q", "0.5", "--theta", "0", "--tau2", "0,0.5,1", "--pc", "0.1",
            "--reps", "100", "--seed", "7", "--workers", workers, "--out", out,
        ]
    };
    let o = lor_meta(&args("a.csv", "1"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    let records = read_raw_records(a.as_slice()).unwrap();
    let per_rep: usize = Estimator::all().iter().map(|e| e.quantities().len()).sum();
    assert_eq!(records.len(), 3 * 100 * per_rep);
    let cells: BTreeSet<_> = records.iter().map(|r| r.cell).collect();
    assert_eq!(cells.len(), 3);

    let manifest = fs::read_to_string(dir.path().join("a.csv.manifest")).unwrap();
    for line in ["command=simulate", "seed=7", "reps=100", "cells=3", "tau2=0,0.5,1", "version="] {
        assert!(manifest.contains(line), "{manifest}");
    }
    assert!(manifest.contains("invocation=") && manifest.contains("--tau2 0,0.5,1"));

    lor_meta(&args("b.csv", "1"), dir.path());
    lor_meta(&args("c.csv", "8"), dir.path());
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(a, fs::read(dir.path().join("c.csv")).unwrap());
}

#[test]
fn simulate_rejects_off_menu_values() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["simulate", "--k", "5", "--n", "40", "--q", "0.5", "--theta", "0", "--pc", "0.1", "--reps", "2"];
    let run = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        a.extend_from_slice(&["--methods", "DL", "--out", "r.csv"]);
        lor_meta(&a, dir.path()).status.code()
    };
    assert_eq!(run(&["--tau2", "0.33"]), Some(2));
    assert_eq!(run(&["--tau2", "0.33", "--allow-custom"]), Some(0));
    assert_eq!(run(&["--tau2", "-1", "--allow-custom"]), Some(2));
    assert_eq!(run(&["--tau2", "0", "--size-scheme", "unequal", "--k", "7", "--allow-custom"]), Some(2));
    assert_eq!(run(&["--tau2", "0", "--reps", "0"]), Some(2));
}

#[test]
fn report_panel_layout_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = lor_meta(
        &[
            "simulate", "--k", "5,10,30", "--size-scheme", "equal", "--q", "0.5", "--theta", "0,1", "--tau2", "0,0.4",
            "--pc", "0.1", "--reps", "4", "--seed", "3", "--methods", "DL,QP,IV_DL,SSW,IV_MP", "--out", "raw.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = lor_meta(&["report", "raw.csv", "--out-dir", "panels"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    // Figure keys: θ ∈ {0, 1} with p_c, q and the size scheme fixed; six metric families.
    let panels = dir.path().join("panels");
    let mut names: Vec<String> = fs::read_dir(&panels)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    assert_eq!(names.len(), 2 * 6, "{names:?}");
    assert!(names.contains(&"biasTau_pc01_theta0_q05_equal.csv".to_string()));
    assert!(dir.path().join("panels/manifest.txt").exists());

    // Each figure holds 3 K values × 4 sizes = 12 panels.
    let rows = csv_rows(&panels.join("biasTau_pc01_theta1_q05_equal.csv"));
    let panels_in_fig: BTreeSet<(String, String)> = rows.iter().map(|r| (r[0].clone(), r[1].clone())).collect();
    assert_eq!(panels_in_fig.len(), 12);
    assert_eq!(rows.len(), 12 * 2);

    // Same numbers as an in-process sweep, aggregate and emission.
    let mut grid = Vec::new();
    for k in [5, 10, 30] {
        for n in [40, 100, 250, 1000] {
            for theta in [0.0, 1.0] {
                for tau2 in [0.0, 0.4] {
                    grid.push(SimConfig {
                        k,
                        size_scheme: SizeScheme::Equal(n),
                        q: 0.5,
                        theta,
                        tau2,
                        p_c: 0.1,
                        replications: 4,
                        seed: 3,
                    });
                }
            }
        }
    }
    let analysis = Analysis::new(Estimator::select_list("DL,QP,IV_DL,SSW,IV_MP").unwrap());
    let direct = run_sweep(&grid, &analysis, 2).unwrap();
    let from_file = read_raw_records(fs::read(dir.path().join("raw.csv")).unwrap().as_slice()).unwrap();
    assert_eq!(direct, from_file);
    let in_process = dir.path().join("direct");
    emit_panels(&aggregate(&direct).unwrap(), &PanelLayout::default(), &in_process).unwrap();
    for name in &names {
        assert_eq!(fs::read(panels.join(name)).unwrap(), fs::read(in_process.join(name)).unwrap(), "{name}");
    }

    // Rerun is byte-identical.
    let before = fs::read(panels.join(&names[0])).unwrap();
    lor_meta(&["report", "raw.csv", "--out-dir", "panels"], dir.path());
    assert_eq!(before, fs::read(panels.join(&names[0])).unwrap());
}

#[test]
fn report_rejects_empty_and_foreign_files() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "empty.csv", "");
    assert_eq!(lor_meta(&["report", "empty.csv", "--out-dir", "o"], dir.path()).status.code(), Some(2));
    write(
        dir.path(),
        "header_only.csv",
        "k,size_scheme,n,q,theta,tau2,p_c,policy,rep,method,quantity,value,status\n",
    );
    assert_eq!(lor_meta(&["report", "header_only.csv", "--out-dir", "o"], dir.path()).status.code(), Some(2));
    write(dir.path(), "other.csv", "a,b\n1,2\n");
    let o = lor_meta(&["report", "other.csv", "--out-dir", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schema"));
    assert!(!dir.path().join("o").exists());
}
