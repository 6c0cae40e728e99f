//! Denoising score matching on the unit linear testbed, then the relative
//! error of the implied score against the closed form over t in (0, 100].
//!
//! cargo run --release --example train_score [epochs]

use std::time::Instant;

use pmg::manifold::{analytic_score, sample_manifold_data, TestbedSpec};
use pmg::rng::{normal_vector, seeded};
use pmg::schedule::ScheduleConfig;
use pmg::scoremodel::{score_from_noise, train_dsm, DsmConfig, ScoreNetConfig, ScoreNetwork};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map_or(Ok(400), |a| a.parse())?;
    let s = ScheduleConfig::default().build()?;
    let (m, g) = TestbedSpec::standard(8, 2, 7).build()?;
    let data = sample_manifold_data(&m, &g, 4096, 1)?;
    let init = ScoreNetwork::new(8, s.step_count(), &ScoreNetConfig::default())?;
    let cfg = DsmConfig {
        epochs,
        ..DsmConfig::full_range(s.step_count())
    };

    let start = Instant::now();
    let (net, curve) = train_dsm(&init, &data, &s, &cfg)?;
    println!("trained {epochs} epochs in {:.1?}", start.elapsed());
    for (i, l) in curve.iter().enumerate().filter(|(i, _)| i % (epochs / 8).max(1) == 0) {
        println!("  epoch {i:>4}  loss {l:.4}");
    }

    let mut rng = seeded(99);
    let mut total = 0.0;
    for t in (10..=100).step_by(10) {
        let a = s.alpha_bar(t)?;
        let mut err = 0.0;
        for _ in 0..200 {
            let x0 = m.basis() * g.sample(&mut rng) + m.offset();
            let xt = &x0 * a.sqrt() + normal_vector(&mut rng, 8) * (1.0 - a).sqrt();
            let exact = analytic_score(&m, &g, &s, &xt, t)?;
            let learned = score_from_noise(&net.predict_noise(&xt, t)?.eps, &s, t)?;
            err += (learned - &exact).norm() / exact.norm();
        }
        err /= 200.0;
        println!("t = {t:>3}  relative error {err:.4}");
        total += err;
    }
    println!("mean relative error {:.4}", total / 10.0);
    Ok(())
}
