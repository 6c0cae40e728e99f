//! The perceptual loss G2 under each feature extractor, its gradient
//! tangency, and a small step along the tangent direction.
//!
//! cargo run --release --example perceptual_guidance

use std::sync::Arc;

use pmg::manifold::{tangent_residual, LinearAutoencoder, TestbedSpec};
use pmg::perceptual::{g2_value_grad, PsiKind, PsiSpec};
use pmg::rng::{normal_vector, seeded};
use pmg::sampler::SamplerRunConfig;
use pmg::schedule::ScheduleConfig;
use pmg::scoremodel::{ScoreNetConfig, ScoreNetwork};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = 8;
    let s = ScheduleConfig::default().build()?;
    let (m, g) = TestbedSpec::standard(d, 2, 7).build()?;
    let chart = LinearAutoencoder::new(m.clone());
    // an untrained network still gives a smooth feature map
    let net = Arc::new(ScoreNetwork::new(d, s.step_count(), &ScoreNetConfig::default())?);
    let run = SamplerRunConfig {
        steps: 3,
        ..SamplerRunConfig::default()
    };

    let mut rng = seeded(1);
    let y = m.basis() * g.sample(&mut rng) + m.normal_component(&normal_vector(&mut rng, d)) * 0.5;
    let c = chart.encode(&y) + normal_vector(&mut rng, 2) * 0.3;

    for kind in [PsiKind::None, PsiKind::Identity, PsiKind::Linear, PsiKind::Mlp, PsiKind::ScorenetFeatures] {
        let spec = PsiSpec {
            kind,
            ..PsiSpec::default()
        };
        let psi = spec.build(d, &net, &s, &run)?.targeted(&y)?;
        let (g2, grad) = g2_value_grad(&c, &psi, &chart)?;
        let residual = tangent_residual(&chart, &grad);
        let step = if grad.norm() > 0.0 { 1e-3 / grad.norm() } else { 0.0 };
        let (after, _) = g2_value_grad(&(&c - &grad * step), &psi, &chart)?;
        println!(
            "{:>18}  G2 {g2:>12.6}  |grad| {:>10.4e}  normal residual {residual:.1e}  after step {after:>12.6}",
            psi.kind().name(),
            grad.norm()
        );
    }
    Ok(())
}
