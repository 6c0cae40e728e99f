//! Hyperfeature pooling, a ridge head chosen on validation data, and the
//! correlation metrics, on synthetic taps whose last block carries the
//! quality signal.
//!
//! cargo run --example quality_regression

use nalgebra::{DMatrix, DVector};
use pmg::quality::{aggregate, average_ranks, select_ridge, CorrelationReport, Pooling, RIDGE_LAMBDA_GRID};
use pmg::rng::{normal, seeded};
use pmg::sampler::TapRecord;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = seeded(2);
    let n = 300;
    let quality: Vec<f64> = (0..n).map(|i| 100.0 * (i as f64 / n as f64)).collect();
    let mut rows = Vec::with_capacity(n);
    for &q in &quality {
        let mut taps = Vec::new();
        for t in [30, 20, 10] {
            for layer in 0..2 {
                let values = DVector::from_fn(4, |j, _| {
                    let signal = match (layer, j) {
                        (1, 0) => q / 50.0,
                        (1, 1) => (q / 50.0).powi(2),
                        _ => 0.0,
                    };
                    signal + 0.2 * normal(&mut rng)
                });
                taps.push(TapRecord { t, layer, values });
            }
        }
        rows.push(aggregate(&taps, Pooling::Concat)?.pooled().clone());
    }
    let x = DMatrix::from_fn(n, rows[0].len(), |i, j| rows[i][j]);
    println!("pooled feature length {}", x.ncols());

    let pick = |idx: &[usize]| DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)]);
    let ys = |idx: &[usize]| idx.iter().map(|&i| quality[i]).collect::<Vec<_>>();
    let (train, val, test): (Vec<usize>, Vec<usize>, Vec<usize>) = (
        (0..n).filter(|i| i % 10 < 7).collect(),
        (0..n).filter(|i| i % 10 == 7).collect(),
        (0..n).filter(|i| i % 10 >= 8).collect(),
    );
    let (head, lambda) = select_ridge(&pick(&train), &ys(&train), &pick(&val), &ys(&val), &RIDGE_LAMBDA_GRID)?;
    let pred = head.predict_rows(&pick(&test))?;
    let report = CorrelationReport::compute(&pred, &ys(&test))?;
    println!("lambda {lambda}  test PLCC {:.4}  SRCC {:.4}  n {}", report.plcc, report.srcc, report.n);
    println!("average ranks of [3, 1, 3, 2]: {:?}", average_ranks(&[3.0, 1.0, 3.0, 2.0]));
    Ok(())
}
