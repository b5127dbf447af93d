//! A small factorial sweep written to a raw CSV, read back, aggregated and
//! emitted as per-figure panel files.
//!
//! cargo run --release --example sweep_report [out_dir]

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use lor_meta::analysis::{Analysis, Estimator};
use lor_meta::metrics::{aggregate, emit_panels, PanelLayout};
use lor_meta::sim::{read_raw_records, run_sweep_with, RawWriter, SimConfig, SizeScheme};

fn main() -> lor_meta::Result<()> {
    let out_dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("lor-meta-sweep"));
    std::fs::create_dir_all(&out_dir)?;

    let mut grid = Vec::new();
    for size_scheme in [SizeScheme::Equal(40), SizeScheme::Equal(100), SizeScheme::Unequal(30), SizeScheme::Unequal(60)] {
        for tau2 in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            grid.push(SimConfig { k: 5, size_scheme, q: 0.5, theta: 0.5, tau2, p_c: 0.2, replications: 100, seed: 9 });
        }
    }
    let roster = Estimator::select_list("DL,MP,QP,BJ,IV_DL,IV_MP,SSW,HKSJ_DL")?;
    let raw_path = out_dir.join("raw.csv");
    let mut writer = RawWriter::new(File::create(&raw_path)?)?;
    run_sweep_with(&grid, &Analysis::new(roster), 4, |records| writer.write(records))?;
    writer.finish()?;

    let records = read_raw_records(BufReader::new(File::open(&raw_path)?))?;
    let metrics = aggregate(&records)?;
    let panels = emit_panels(&metrics, &PanelLayout::default(), &out_dir)?;
    println!("{} records, {} metrics", records.len(), metrics.len());
    for p in panels {
        println!("  {}", p.display());
    }
    Ok(())
}
