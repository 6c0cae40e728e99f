//! `report.json`, `items.csv`, `ablation_*.csv` and benchmark dumps.
//!
//! Every CSV starts with `config_hash` and `seed` columns. Apart from the
//! `wall_ms` column of the step sweep, bodies are byte-identical across
//! reruns of the same config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::benchmark::Benchmark;
use super::experiment::{bucket_label, Ablation, AblationTable, ExperimentOutput, ExperimentReport};
use super::BenchError;
use crate::quality::{CorrelationReport, QualityError};

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<PathBuf, BenchError> {
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| BenchError::Io(std::io::Error::other(e)))?;
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}

/// One row per benchmark item. `predicted` is the mean test-split
/// prediction and is empty for items never tested or aborted.
pub fn write_items_csv(dir: &Path, out: &ExperimentOutput) -> Result<PathBuf, BenchError> {
    let path = dir.join("items.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "config_hash",
        "seed",
        "item_id",
        "content_id",
        "family",
        "level",
        "severity",
        "true_score",
        "predicted_score",
    ])?;
    let mut predicted = vec![None; out.benchmark.items.len()];
    for (f, p) in out.features.items.iter().zip(&out.summary.predictions) {
        predicted[f.id] = *p;
    }
    for (item, p) in out.benchmark.items.iter().zip(predicted) {
        w.write_record([
            out.report.config_hash.clone(),
            out.report.seed.to_string(),
            item.id.to_string(),
            item.content_id.to_string(),
            item.family_label().to_string(),
            item.level.to_string(),
            fmt(item.severity),
            fmt(item.true_quality),
            p.map(fmt).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(path)
}

/// Long format `config_hash,seed,<setting>,plcc,srcc[,wall_ms]`, except the
/// time-range sweep, whose header lists the buckets verbatim with one row
/// per metric.
pub fn write_ablation_csv(dir: &Path, table: &AblationTable) -> Result<PathBuf, BenchError> {
    let path = dir.join(format!("{}.csv", table.which.file_stem()));
    let mut w = csv::Writer::from_path(&path)?;
    let meta = [table.config_hash.clone(), table.seed.to_string()];
    if table.which == Ablation::TimeRange {
        let mut header = vec!["config_hash".to_string(), "seed".into(), "metric".into()];
        header.extend(table.rows.iter().map(|r| r.setting.clone()));
        w.write_record(&header)?;
        for (name, get) in [("srcc", (|r: &super::AblationRow| r.srcc) as fn(&_) -> f64), ("plcc", |r| r.plcc)] {
            let mut rec = meta.to_vec();
            rec.push(name.into());
            rec.extend(table.rows.iter().map(|r| fmt(get(r))));
            w.write_record(&rec)?;
        }
    } else {
        let setting = match table.which {
            Ablation::Zeta2 => "zeta2",
            Ablation::Steps => "steps",
            _ => "layer",
        };
        let timed = table.rows.iter().any(|r| r.wall_ms.is_some());
        let mut header = vec!["config_hash", "seed", setting, "plcc", "srcc"];
        if timed {
            header.push("wall_ms");
        }
        w.write_record(&header)?;
        for r in &table.rows {
            let mut rec = meta.to_vec();
            rec.extend([r.setting.clone(), fmt(r.plcc), fmt(r.srcc)]);
            if timed {
                rec.push(r.wall_ms.map(|v| format!("{v:.3}")).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(path)
}

/// Dumps the generated items with their measurement coordinates.
pub fn write_benchmark_csv(dir: &Path, bench: &Benchmark, config_hash: &str, seed: u64) -> Result<PathBuf, BenchError> {
    let path = dir.join("benchmark.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let dim = bench.items.first().map_or(0, |i| i.measurement.len());
    let mut header: Vec<String> = ["config_hash", "seed", "item_id", "content_id", "family", "level", "severity", "true_score"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for item in &bench.items {
        let mut rec = vec![
            config_hash.to_string(),
            seed.to_string(),
            item.id.to_string(),
            item.content_id.to_string(),
            item.family_label().to_string(),
            item.level.to_string(),
            fmt(item.severity),
            fmt(item.true_quality),
        ];
        rec.extend(item.measurement.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFile {
    pub source: String,
    pub overall: CorrelationReport,
    pub per_family: Vec<(String, Option<CorrelationReport>)>,
}

/// PLCC/SRCC of `predicted_score` against `true_score` in an `items.csv`,
/// over all predicted rows and per family.
pub fn correlate_items_csv(path: &Path) -> Result<CorrelationFile, BenchError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| BenchError::Config(format!("{} lacks column {name}", path.display())))
    };
    let (fam, truth, pred) = (col("family")?, col("true_score")?, col("predicted_score")?);
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec[pred].is_empty() {
            continue;
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| BenchError::Config(format!("bad number {s:?}: {e}")))
        };
        rows.push((rec[fam].to_string(), parse(&rec[truth])?, parse(&rec[pred])?));
    }
    let report = |rs: &[&(String, f64, f64)]| -> Result<CorrelationReport, QualityError> {
        let p: Vec<f64> = rs.iter().map(|r| r.2).collect();
        let t: Vec<f64> = rs.iter().map(|r| r.1).collect();
        CorrelationReport::compute(&p, &t)
    };
    let all: Vec<&(String, f64, f64)> = rows.iter().collect();
    let overall = report(&all)?;
    let mut families: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    families.sort();
    families.dedup();
    let per_family = families
        .into_iter()
        .map(|f| {
            let sub: Vec<&(String, f64, f64)> = rows.iter().filter(|r| r.0 == f).collect();
            let rep = report(&sub).ok();
            (f, rep)
        })
        .collect();
    Ok(CorrelationFile {
        source: path.display().to_string(),
        overall,
        per_family,
    })
}

/// Header label of a time-range bucket.
pub fn time_bucket_header(buckets: &[(usize, usize)]) -> Vec<String> {
    buckets.iter().map(|&b| bucket_label(b)).collect()
}

#[cfg(test)]
mod tests {
    use super::super::experiment::AblationRow;
    use super::*;

    fn sample_table(which: Ablation, settings: &[&str]) -> AblationTable {
        AblationTable {
            which,
            config_hash: "abc".into(),
            seed: 3,
            rows: settings
                .iter()
                .enumerate()
                .map(|(i, s)| AblationRow {
                    setting: s.to_string(),
                    plcc: 0.5 + i as f64 * 0.1,
                    srcc: 0.4 + i as f64 * 0.1,
                    wall_ms: (which == Ablation::Steps).then_some(1.5),
                })
                .collect(),
        }
    }

    #[test]
    fn time_range_header_lists_buckets() {
        let dir = tempfile::tempdir().unwrap();
        let buckets = [(0, 100), (200, 300)];
        let labels = time_bucket_header(&buckets);
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let path = write_ablation_csv(dir.path(), &sample_table(Ablation::TimeRange, &refs)).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"config_hash,seed,metric,"(0,100]","(200,300]""#);
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn long_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_ablation_csv(dir.path(), &sample_table(Ablation::Steps, &["1", "10"])).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(path.ends_with("ablation_steps.csv"));
        assert_eq!(text.lines().next().unwrap(), "config_hash,seed,steps,plcc,srcc,wall_ms");
        assert_eq!(text.lines().nth(1).unwrap(), "abc,3,1,0.500000,0.400000,1.500");
        let path = write_ablation_csv(dir.path(), &sample_table(Ablation::Zeta2, &["0", "0.2"])).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "config_hash,seed,zeta2,plcc,srcc");
    }

    #[test]
    fn correlate_items() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.csv");
        std::fs::write(
            &path,
            "config_hash,seed,item_id,content_id,family,level,severity,true_score,predicted_score\n\
             h,0,0,0,control,0,0,100,90\n\
             h,0,1,0,a,1,1,50,60\n\
             h,0,2,0,a,2,2,20,10\n\
             h,0,3,0,a,3,3,10,\n\
             h,0,4,1,a,1,1,40,45\n",
        )
        .unwrap();
        let c = correlate_items_csv(&path).unwrap();
        assert_eq!(c.overall.n, 4);
        assert!((c.overall.srcc - 1.0).abs() < 1e-12);
        assert_eq!(c.per_family.len(), 2);
        assert!(c.per_family[1].1.is_none());
    }
}
