#![allow(dead_code)]

use std::sync::OnceLock;

use pmg::bench::{Pipeline, RunConfig};
use pmg::manifold::{CovarianceSpec, LatentGaussian, LinearAutoencoder, LinearManifold, TestbedSpec};
use pmg::sampler::AnalyticPredictor;
use pmg::schedule::{NoiseSchedule, ScheduleConfig};

pub fn schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

pub struct Testbed {
    pub manifold: LinearManifold,
    pub latent: LatentGaussian,
    pub chart: LinearAutoencoder,
    pub predictor: AnalyticPredictor,
    pub schedule: NoiseSchedule,
}

pub fn testbed(spec: &TestbedSpec) -> Testbed {
    let (manifold, latent) = spec.build().unwrap();
    let schedule = schedule();
    Testbed {
        chart: LinearAutoencoder::new(manifold.clone()),
        predictor: AnalyticPredictor {
            manifold: manifold.clone(),
            latent: latent.clone(),
            schedule: schedule.clone(),
        },
        manifold,
        latent,
        schedule,
    }
}

/// D = 6, k = 2 with a correlated, shifted latent and a nonzero offset.
pub fn skewed_spec() -> TestbedSpec {
    TestbedSpec {
        latent_mean: vec![1.0, -0.5],
        latent_cov: CovarianceSpec::Dense(vec![vec![1.0, 0.3], vec![0.3, 0.5]]),
        offset: vec![0.2, -0.1, 0.0, 0.3, 0.1, -0.2],
        ..TestbedSpec::standard(6, 2, 3)
    }
}

/// Small enough to train and evaluate in a few seconds.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig {
        testbed: TestbedSpec::standard(8, 2, 7),
        ..RunConfig::default()
    };
    cfg.score.net.hidden = vec![8, 8, 8];
    cfg.score.dsm.epochs = 20;
    cfg.score.train_samples = 512;
    cfg.benchmark.n_contents = 20;
    cfg.split.repeats = 3;
    cfg.sampler.steps = 3;
    cfg
}

pub fn tiny_pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| Pipeline::train(&tiny_config()).unwrap().0)
}
