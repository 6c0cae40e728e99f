mod common;

use std::sync::Arc;

use nalgebra::DVector;
use pmg::manifold::TestbedSpec;
use pmg::perceptual::{PerceptualExtractor, PsiKind, PsiSpec};
use pmg::rng::{normal_vector, seeded};
use pmg::sampler::{lgdm_run, pmg_update, G2Point, GuidanceConfig, SamplerRunConfig};
use pmg::scoremodel::{ScoreNetConfig, ScoreNetwork};

use common::testbed;

const KINDS: [PsiKind; 5] = [
    PsiKind::None,
    PsiKind::Identity,
    PsiKind::Linear,
    PsiKind::Mlp,
    PsiKind::ScorenetFeatures,
];

fn mean_g1_per_step(kind: PsiKind, g2_point: G2Point) -> Vec<f64> {
    let tb = testbed(&TestbedSpec::standard(8, 2, 7));
    let net = Arc::new(ScoreNetwork::new(8, 1000, &ScoreNetConfig::default()).unwrap());
    let run = SamplerRunConfig::default();
    let psi_run = SamplerRunConfig { steps: 2, ..run.clone() };
    let guidance = GuidanceConfig { g2_point, ..GuidanceConfig::default() };
    let mut rng = seeded(1);
    let n = 100;
    let mut acc = vec![0.0; run.steps];
    for i in 0..n {
        let noise = normal_vector(&mut rng, 8);
        let y = tb.chart.decode(&tb.latent.sample(&mut rng)) + tb.manifold.normal_component(&noise) * 0.3;
        let psi = PsiSpec { kind, ..PsiSpec::default() }
            .build(8, &net, &tb.schedule, &psi_run)
            .unwrap()
            .targeted(&y)
            .unwrap();
        let out = lgdm_run(
            &y,
            &tb.predictor,
            &tb.chart,
            &psi,
            &tb.schedule,
            &SamplerRunConfig { seed: i, ..run.clone() },
            &guidance,
        )
        .unwrap();
        for (a, st) in acc.iter_mut().zip(&out.trajectory.steps) {
            *a += st.g1 / n as f64;
        }
    }
    acc
}

// Three-step moving average, allowed to level off once the tangent error is
// gone and only the off-manifold part of the measurement remains.
fn assert_non_increasing_trend(g1: &[f64], label: &str) {
    let slack = 1e-3 * g1[0];
    let smooth: Vec<f64> = g1.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0] + slack, "{label}: smoothed G1 rises {smooth:?}");
    }
    assert!(g1.last().unwrap() < g1.first().unwrap(), "{label}: {g1:?}");
}

#[test]
fn g1_trend_at_default_weights() {
    assert_non_increasing_trend(&mean_g1_per_step(PsiKind::None, G2Point::Tweedie), "none");
    for kind in KINDS {
        let label = format!("{kind:?} at the corrected point");
        assert_non_increasing_trend(&mean_g1_per_step(kind, G2Point::Corrected), &label);
    }
}

// On-manifold measurement, identity ψ, ζ1 = 1, ζ2 = 0.2: the data step maps
// a tangent error e to −e; the perceptual step then adds −0.4·e when taken
// at the Tweedie point and +0.4·e when taken at the corrected point.
#[test]
fn tangent_error_gain_per_evaluation_point() {
    let tb = testbed(&TestbedSpec::standard(8, 3, 2));
    let mut rng = seeded(3);
    for _ in 0..50 {
        let y = tb.chart.decode(&tb.latent.sample(&mut rng));
        let e = tb.chart.decode_direction(&normal_vector(&mut rng, 3));
        let z_hat = &y + &e;
        let psi = PerceptualExtractor::identity().targeted(&y).unwrap();
        for (point, gain) in [(G2Point::Tweedie, -1.4), (G2Point::Corrected, -0.6)] {
            let g = GuidanceConfig { g2_point: point, ..GuidanceConfig::default() };
            let u = pmg_update(&z_hat, &y, &psi, &tb.chart, &g).unwrap();
            assert!((&u.z_prime - &y + &e).amax() < 1e-12);
            assert!((&u.z_double - &y - &e * gain).amax() < 1e-12, "{point:?}");
        }
    }
}

#[test]
fn zero_perceptual_weight_matches_inert_psi() {
    let tb = testbed(&TestbedSpec::standard(6, 2, 9));
    let mut rng = seeded(4);
    let y: DVector<f64> = tb.chart.decode(&tb.latent.sample(&mut rng)) + normal_vector(&mut rng, 6) * 0.2;
    let guidance = GuidanceConfig { zeta2: 0.0, ..GuidanceConfig::default() };
    let run = SamplerRunConfig { eta: 0.5, seed: 77, ..SamplerRunConfig::default() };
    let mlp = PsiSpec { kind: PsiKind::Mlp, seed: 3, ..PsiSpec::default() };
    let net = Arc::new(ScoreNetwork::new(6, 1000, &ScoreNetConfig::default()).unwrap());
    let active = mlp.build(6, &net, &tb.schedule, &run).unwrap().targeted(&y).unwrap();
    let inert = PerceptualExtractor::none().targeted(&y).unwrap();
    let a = lgdm_run(&y, &tb.predictor, &tb.chart, &active, &tb.schedule, &run, &guidance).unwrap();
    let b = lgdm_run(&y, &tb.predictor, &tb.chart, &inert, &tb.schedule, &run, &guidance).unwrap();
    assert_eq!(a.trajectory.final_state, b.trajectory.final_state);
    for (p, q) in a.trajectory.steps.iter().zip(&b.trajectory.steps) {
        assert_eq!((&p.z_t, &p.z0_double), (&q.z_t, &q.z0_double));
        assert!(p.g2 > 0.0 && q.g2 == 0.0);
    }
}
