//! One of the four sweeps (zeta2, steps, time-range, layers) on the default
//! benchmark. Writes ablation_<which>.csv.
//!
//! cargo run --release --example ablation -- layers [out_dir]

use std::path::PathBuf;

use pmg::bench::{run_ablation, write_ablation_csv, Ablation, Pipeline, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let which = match args.next().as_deref().unwrap_or("layers") {
        "zeta2" => Ablation::Zeta2,
        "steps" => Ablation::Steps,
        "time-range" => Ablation::TimeRange,
        "layers" => Ablation::Layers,
        other => return Err(format!("unknown sweep {other}").into()),
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out".into()));
    std::fs::create_dir_all(&out)?;

    let cfg = RunConfig::default();
    let (p, _) = Pipeline::train(&cfg)?;
    let table = run_ablation(&p, &cfg, which)?;
    for row in &table.rows {
        let wall = row.wall_ms.map(|w| format!("  {w:.2} ms/item")).unwrap_or_default();
        println!("{:>10}  PLCC {:.4}  SRCC {:.4}{wall}", row.setting, row.plcc, row.srcc);
    }
    println!("wrote {}", write_ablation_csv(&out, &table)?.display());
    Ok(())
}
