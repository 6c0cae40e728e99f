//! Forward-diffused samples of a 2-dimensional subspace in R^100 concentrate
//! on a shell of radius r_t around the scaled manifold.
//!
//! cargo run --release --example manifold_concentration

use pmg::manifold::{concentration_radius, distance_to_manifold, epsilon_band, sample_manifold_data, TestbedSpec};
use pmg::rng::{normal_vector, seeded};
use pmg::sampler::forward_diffuse;
use pmg::schedule::ScheduleConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (d, k, n, delta) = (100, 2, 10_000, 0.01);
    let s = ScheduleConfig::default().build()?;
    let (m, g) = TestbedSpec::standard(d, k, 3).build()?;
    let clean = sample_manifold_data(&m, &g, n, 4)?;
    let mut rng = seeded(5);
    println!("{:>5} {:>9} {:>9} {:>7} {:>9}", "t", "r_t", "mean", "eps", "inside");
    for t in [100, 500, 900] {
        let a = s.alpha_bar(t)?;
        let r = concentration_radius(&s, t, d, k)?;
        let eps = epsilon_band(delta, &s, t, d, k)?;
        let mut sum = 0.0;
        let mut inside = 0;
        for x0 in &clean {
            let xt = forward_diffuse(x0, &s, t, &normal_vector(&mut rng, d))?;
            let dist = distance_to_manifold(&xt, &m, a.sqrt())?;
            sum += dist;
            if (dist - r).abs() <= eps * r {
                inside += 1;
            }
        }
        println!(
            "{t:>5} {r:>9.4} {:>9.4} {eps:>7.4} {:>8.2}%",
            sum / n as f64,
            100.0 * inside as f64 / n as f64
        );
    }
    Ok(())
}
