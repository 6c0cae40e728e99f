//! The default synthetic benchmark end to end: train the score network,
//! extract hyperfeatures for every item, fit ridge heads over repeated
//! content splits and write report.json and items.csv.
//!
//! cargo run --release --example benchmark [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use pmg::bench::{run_experiment, write_items_csv, write_report, Pipeline, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out".into()));
    std::fs::create_dir_all(&out)?;
    let cfg = RunConfig::default();
    println!("config {}", cfg.hash());

    let start = Instant::now();
    let (p, curve) = Pipeline::train(&cfg)?;
    println!("score network: {} epochs, final loss {:.4}, {:.1?}", curve.len(), curve.last().unwrap_or(&f64::NAN), start.elapsed());

    let start = Instant::now();
    let result = run_experiment(&p, &cfg)?;
    let r = &result.report;
    println!("{} items, feature length {}, {:.1?}", r.n_items, r.feature_dim, start.elapsed());
    for rep in &r.repeats {
        let lambda = rep.lambda.map_or("-".to_string(), |l| l.to_string());
        println!("  repeat {:>2}  lambda {lambda:<6}  PLCC {:.4}  SRCC {:.4}", rep.repeat, rep.plcc, rep.srcc);
    }
    println!("median PLCC {:.4}  SRCC {:.4}", r.median_plcc, r.median_srcc);
    println!(
        "single block (t = {}, layer {}): SRCC {:.4}",
        r.baseline.t, r.baseline.layer, r.baseline.median_srcc
    );
    write_report(&out, r)?;
    write_items_csv(&out, &result)?;
    println!("wrote {}", out.display());
    Ok(())
}
