//! Forward diffusion, Tweedie estimates, DDIM updates and the guided
//! sampling loop that collects hyperfeatures.
//!
//! The sampler state lives in the ambient `D`-dimensional space where the
//! testbed manifold sits. Guidance gradients are taken in the latent chart of
//! the autoencoder and pushed back as tangent directions, so a guided update
//! never moves the state off the noisy manifold shell.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{analytic_score, LatentGaussian, LinearManifold, ManifoldError};
use crate::perceptual::{g1_value_grad, g2_value_grad, LatentChart, PerceptualError, PerceptualExtractor};
use crate::rng::{normal_vector, seeded};
use crate::schedule::{ddim_sigma_between, noise_coefficient, NoiseSchedule, ScheduleError};
use crate::scoremodel::{NoisePrediction, ScoreError, ScoreNetwork};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("alpha_bar is zero at t = {0}; Tweedie estimate undefined")]
    ZeroSignal(usize),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("non-finite state at timestep {t}")]
    NonFinite { t: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Perceptual(#[from] PerceptualError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Source of noise predictions `ε̂(x_t, t)` with optional layer taps.
pub trait NoisePredictor {
    fn state_dim(&self) -> usize;
    fn predict(&self, x_t: &DVector<f64>, t: usize) -> Result<NoisePrediction, SamplerError>;
}

impl NoisePredictor for ScoreNetwork {
    fn state_dim(&self) -> usize {
        ScoreNetwork::state_dim(self)
    }

    fn predict(&self, x_t: &DVector<f64>, t: usize) -> Result<NoisePrediction, SamplerError> {
        Ok(self.predict_noise(x_t, t)?)
    }
}

/// Exact noise predictor of a Gaussian testbed: `ε* = −√(1 − ᾱ_t)·∇log p_t`.
/// Produces no taps.
#[derive(Debug, Clone)]
pub struct AnalyticPredictor {
    pub manifold: LinearManifold,
    pub latent: LatentGaussian,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for AnalyticPredictor {
    fn state_dim(&self) -> usize {
        self.manifold.ambient_dim()
    }

    fn predict(&self, x_t: &DVector<f64>, t: usize) -> Result<NoisePrediction, SamplerError> {
        let score = analytic_score(&self.manifold, &self.latent, &self.schedule, x_t, t)?;
        let a = self.schedule.alpha_bar(t)?;
        Ok(NoisePrediction {
            eps: score * -(1.0 - a).sqrt(),
            taps: BTreeMap::new(),
        })
    }
}

/// Timestep selection and stochasticity of one sampling pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerRunConfig {
    pub steps: usize,
    /// Half-open `(low, high]` window of timesteps.
    pub t_range: (usize, usize),
    pub eta: f64,
    pub seed: u64,
    /// Forward-diffuse the encoded measurement to the top timestep before
    /// the loop. `false` starts the chain from the clean encoding.
    #[serde(default = "default_renoise")]
    pub renoise: bool,
}

fn default_renoise() -> bool {
    true
}

impl Default for SamplerRunConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            t_range: (0, 100),
            eta: 0.0,
            seed: 0,
            renoise: true,
        }
    }
}

impl SamplerRunConfig {
    /// `steps` evenly spaced timesteps in `(low, high]`, descending, ending
    /// at `high` on top.
    pub fn timesteps(&self) -> Result<Vec<usize>, SamplerError> {
        let (low, high) = self.t_range;
        if high <= low {
            return Err(SamplerError::InvalidConfig(format!(
                "empty timestep range ({low}, {high}]"
            )));
        }
        let width = high - low;
        if self.steps == 0 || self.steps > width {
            return Err(SamplerError::InvalidConfig(format!(
                "{} steps do not fit in ({low}, {high}]",
                self.steps
            )));
        }
        Ok((1..=self.steps)
            .rev()
            .map(|i| low + (width * i + self.steps / 2) / self.steps)
            .collect())
    }

    fn validate(&self, s: &NoiseSchedule) -> Result<Vec<usize>, SamplerError> {
        if !(self.eta.is_finite() && (0.0..=1.0).contains(&self.eta)) {
            return Err(SamplerError::InvalidConfig(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.t_range.1 > s.step_count() {
            return Err(SamplerError::InvalidConfig(format!(
                "t_range top {} exceeds T = {}",
                self.t_range.1,
                s.step_count()
            )));
        }
        self.timesteps()
    }
}

/// `√ᾱ_t·x₀ + √(1 − ᾱ_t)·noise`.
pub fn forward_diffuse(
    x0: &DVector<f64>,
    s: &NoiseSchedule,
    t: usize,
    noise: &DVector<f64>,
) -> Result<DVector<f64>, SamplerError> {
    if noise.len() != x0.len() {
        return Err(SamplerError::ShapeMismatch {
            expected: x0.len(),
            got: noise.len(),
        });
    }
    let a = s.alpha_bar(t)?;
    Ok(x0 * a.sqrt() + noise * (1.0 - a).sqrt())
}

/// `(x_t − √(1 − ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn tweedie_estimate(
    x_t: &DVector<f64>,
    eps_hat: &DVector<f64>,
    s: &NoiseSchedule,
    t: usize,
) -> Result<DVector<f64>, SamplerError> {
    if eps_hat.len() != x_t.len() {
        return Err(SamplerError::ShapeMismatch {
            expected: x_t.len(),
            got: eps_hat.len(),
        });
    }
    let a = s.alpha_bar(t)?;
    if a <= 0.0 {
        return Err(SamplerError::ZeroSignal(t));
    }
    Ok((x_t - eps_hat * (1.0 - a).sqrt()) * (1.0 / a.sqrt()))
}

/// Score-form Tweedie estimate `(x_t + (1 − ᾱ_t)·score) / √ᾱ_t`.
pub fn tweedie_from_score(
    x_t: &DVector<f64>,
    score: &DVector<f64>,
    s: &NoiseSchedule,
    t: usize,
) -> Result<DVector<f64>, SamplerError> {
    let a = s.alpha_bar(t)?;
    if a <= 0.0 {
        return Err(SamplerError::ZeroSignal(t));
    }
    Ok((x_t + score * (1.0 - a)) * (1.0 / a.sqrt()))
}

/// One DDIM jump `t → prev`:
/// `√ᾱ_prev·z0_ref + √(1 − ᾱ_prev − σ²)·ε̂ + σ·noise`.
///
/// With `prev = 0` the `ᾱ_0 = 1` contract forces `σ = 0` and the result is
/// `z0_ref`.
pub fn ddim_step(
    z0_ref: &DVector<f64>,
    eps_hat: &DVector<f64>,
    s: &NoiseSchedule,
    t: usize,
    prev: usize,
    eta: f64,
    noise: &DVector<f64>,
) -> Result<DVector<f64>, SamplerError> {
    if eps_hat.len() != z0_ref.len() || noise.len() != z0_ref.len() {
        return Err(SamplerError::ShapeMismatch {
            expected: z0_ref.len(),
            got: eps_hat.len().min(noise.len()),
        });
    }
    let sigma = ddim_sigma_between(s, t, prev, eta)?;
    let prev_bar = s.alpha_bar(prev)?;
    let v = noise_coefficient(prev_bar, sigma)?;
    Ok(z0_ref * prev_bar.sqrt() + eps_hat * v + noise * sigma)
}

/// Pre-drawn Gaussian noise for one chain: the re-noising draw and one
/// vector per step. Drawn in that order from the run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainNoise {
    pub start: DVector<f64>,
    pub steps: Vec<DVector<f64>>,
}

impl ChainNoise {
    pub fn draw(seed: u64, dim: usize, steps: usize) -> Self {
        let mut rng = seeded(seed);
        let start = normal_vector(&mut rng, dim);
        let steps = (0..steps).map(|_| normal_vector(&mut rng, dim)).collect();
        Self { start, steps }
    }
}

fn check_finite(v: &DVector<f64>, t: usize) -> Result<(), SamplerError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SamplerError::NonFinite { t })
    }
}

/// Plain (unguided) DDIM from a clean start. Returns every visited state,
/// top timestep first, final clean state last.
pub fn ddim_sample(
    x0: &DVector<f64>,
    predictor: &dyn NoisePredictor,
    s: &NoiseSchedule,
    run: &SamplerRunConfig,
) -> Result<Vec<DVector<f64>>, SamplerError> {
    let ts = run.validate(s)?;
    let noise = ChainNoise::draw(run.seed, x0.len(), ts.len());
    let mut z = if run.renoise {
        forward_diffuse(x0, s, ts[0], &noise.start)?
    } else {
        x0.clone()
    };
    let mut states = vec![z.clone()];
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = predictor.predict(&z, t)?.eps;
        let z0 = tweedie_estimate(&z, &eps, s, t)?;
        z = ddim_step(&z0, &eps, s, t, prev, run.eta, &noise.steps[i])?;
        check_finite(&z, t)?;
        states.push(z.clone());
    }
    Ok(states)
}

/// Which point the perceptual gradient is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum G2Point {
    /// Both gradients at the Tweedie estimate `ẑ₀|t`.
    #[default]
    Tweedie,
    /// Perceptual gradient re-linearized at the data-corrected `z′₀|t`.
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub zeta1: f64,
    pub zeta2: f64,
    #[serde(default)]
    pub g2_point: G2Point,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            zeta1: 1.0,
            zeta2: 0.2,
            g2_point: G2Point::Tweedie,
        }
    }
}

impl GuidanceConfig {
    pub fn unguided() -> Self {
        Self {
            zeta1: 0.0,
            zeta2: 0.0,
            g2_point: G2Point::Tweedie,
        }
    }

    fn validate(&self) -> Result<(), SamplerError> {
        for z in [self.zeta1, self.zeta2] {
            if !(z.is_finite() && z >= 0.0) {
                return Err(SamplerError::InvalidConfig(format!(
                    "guidance weight {z} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Result of the two guidance corrections applied to one Tweedie estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct PmgUpdate {
    pub z_prime: DVector<f64>,
    pub z_double: DVector<f64>,
    /// Losses at the evaluation point, before the update.
    pub g1: f64,
    pub g2: f64,
    pub grad1_norm: f64,
    pub grad2_norm: f64,
}

/// Data-consistency then perceptual-consistency correction of `ẑ₀|t`:
///
/// `z′ = ẑ − ζ₁·D(∇_z G₁(D(E ẑ), y))`, `z″ = z′ − ζ₂·D(∇_z G₂(ψ(D(E ẑ)), ψ(y)))`,
///
/// with the latent gradients pushed to the state through the decoder's
/// tangent map.
pub fn pmg_update(
    z_hat: &DVector<f64>,
    measurement: &DVector<f64>,
    extractor: &PerceptualExtractor,
    chart: &dyn LatentChart,
    guidance: &GuidanceConfig,
) -> Result<PmgUpdate, SamplerError> {
    let latent = chart.encode(z_hat);
    let (g1, grad1) = g1_value_grad(&latent, measurement, chart)?;
    let step1 = chart.decode_direction(&grad1);
    let z_prime = z_hat - step1 * guidance.zeta1;
    let g2_latent = match guidance.g2_point {
        G2Point::Tweedie => latent,
        G2Point::Corrected => chart.encode(&z_prime),
    };
    let (g2, grad2) = g2_value_grad(&g2_latent, extractor, chart)?;
    let step2 = chart.decode_direction(&grad2);
    let z_double = &z_prime - step2 * guidance.zeta2;
    if !(z_double.iter().all(|v| v.is_finite()) && grad1.iter().chain(grad2.iter()).all(|v| v.is_finite())) {
        return Err(PerceptualError::NonFiniteGradient.into());
    }
    Ok(PmgUpdate {
        z_prime,
        z_double,
        g1,
        g2,
        grad1_norm: grad1.norm(),
        grad2_norm: grad2.norm(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    pub z_t: DVector<f64>,
    pub z0_hat: DVector<f64>,
    pub z0_prime: DVector<f64>,
    pub z0_double: DVector<f64>,
    pub g1: f64,
    pub g2: f64,
    pub taps: BTreeMap<usize, DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// State after the last update.
    pub final_state: DVector<f64>,
}

/// One `(t, layer)` activation collected during sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct TapRecord {
    pub t: usize,
    pub layer: usize,
    pub values: DVector<f64>,
}

impl Trajectory {
    /// Every collected tap, in collection order.
    pub fn taps(&self) -> Vec<TapRecord> {
        self.steps
            .iter()
            .flat_map(|s| {
                s.taps.iter().map(move |(&layer, v)| TapRecord {
                    t: s.t,
                    layer,
                    values: v.clone(),
                })
            })
            .collect()
    }

    /// All visited states `z_t` followed by the final state.
    pub fn states(&self) -> Vec<&DVector<f64>> {
        self.steps
            .iter()
            .map(|s| &s.z_t)
            .chain(std::iter::once(&self.final_state))
            .collect()
    }

    /// CSV with columns `t,G1,G2,norm_z_t,norm_z0_hat,norm_z0_prime,norm_z0_double`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SamplerError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "t",
            "G1",
            "G2",
            "norm_z_t",
            "norm_z0_hat",
            "norm_z0_prime",
            "norm_z0_double",
        ])
        .map_err(csv_io)?;
        for s in &self.steps {
            out.write_record([
                s.t.to_string(),
                s.g1.to_string(),
                s.g2.to_string(),
                s.z_t.norm().to_string(),
                s.z0_hat.norm().to_string(),
                s.z0_prime.norm().to_string(),
                s.z0_double.norm().to_string(),
            ])
            .map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Binary dump of the visited states: `u32` rank, `u32` dims, then
    /// `f64` row-major entries, all little-endian.
    pub fn write_states<W: Write>(&self, mut w: W) -> Result<(), SamplerError> {
        let states = self.states();
        let dim = states[0].len();
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(states.len() as u32).to_le_bytes())?;
        w.write_all(&(dim as u32).to_le_bytes())?;
        for s in states {
            for v in s.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> SamplerError {
    SamplerError::Io(std::io::Error::other(e))
}

/// Everything one guided pass over a measurement produces.
#[derive(Debug, Clone, PartialEq)]
pub struct LgdmOutput {
    pub trajectory: Trajectory,
}

impl LgdmOutput {
    pub fn taps(&self) -> Vec<TapRecord> {
        self.trajectory.taps()
    }
}

/// Guided sampling pass over a measurement.
///
/// The measurement enters the state space directly, is forward-diffused to
/// the top timestep (unless `run.renoise` is off), and each selected
/// timestep then runs: predict noise and collect taps, Tweedie estimate,
/// data- and perceptual-consistency corrections, DDIM update.
pub fn lgdm_run(
    measurement: &DVector<f64>,
    predictor: &dyn NoisePredictor,
    chart: &dyn LatentChart,
    extractor: &PerceptualExtractor,
    s: &NoiseSchedule,
    run: &SamplerRunConfig,
    guidance: &GuidanceConfig,
) -> Result<LgdmOutput, SamplerError> {
    guidance.validate()?;
    if measurement.len() != predictor.state_dim() {
        return Err(SamplerError::ShapeMismatch {
            expected: predictor.state_dim(),
            got: measurement.len(),
        });
    }
    check_finite(measurement, 0)?;
    let ts = run.validate(s)?;
    let noise = ChainNoise::draw(run.seed, measurement.len(), ts.len());
    let mut z = if run.renoise {
        forward_diffuse(measurement, s, ts[0], &noise.start)?
    } else {
        measurement.clone()
    };
    let mut steps = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let NoisePrediction { eps, taps } = predictor.predict(&z, t)?;
        let z0_hat = tweedie_estimate(&z, &eps, s, t)?;
        let update = pmg_update(&z0_hat, measurement, extractor, chart, guidance)?;
        let next = ddim_step(&update.z_double, &eps, s, t, prev, run.eta, &noise.steps[i])?;
        check_finite(&next, t)?;
        steps.push(TrajectoryStep {
            t,
            z_t: std::mem::replace(&mut z, next),
            z0_hat,
            z0_prime: update.z_prime,
            z0_double: update.z_double,
            g1: update.g1,
            g2: update.g2,
            taps,
        });
    }
    Ok(LgdmOutput {
        trajectory: Trajectory {
            steps,
            final_state: z,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::LinearAutoencoder;
    use crate::perceptual::IdentityChart;
    use crate::schedule::build_linear_schedule;
    use crate::scoremodel::ScoreNetConfig;

    fn schedule() -> NoiseSchedule {
        build_linear_schedule(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn timestep_selection() {
        let run = SamplerRunConfig::default();
        assert_eq!(
            run.timesteps().unwrap(),
            vec![100, 90, 80, 70, 60, 50, 40, 30, 20, 10]
        );
        let one = SamplerRunConfig {
            steps: 1,
            ..run.clone()
        };
        assert_eq!(one.timesteps().unwrap(), vec![100]);
        let fifty = SamplerRunConfig {
            steps: 50,
            ..run.clone()
        };
        let ts = fifty.timesteps().unwrap();
        assert_eq!((ts[0], ts[49], ts.len()), (100, 2, 50));
        let odd = SamplerRunConfig {
            steps: 3,
            t_range: (200, 300),
            ..run.clone()
        };
        assert_eq!(odd.timesteps().unwrap(), vec![300, 267, 233]);
        let too_many = SamplerRunConfig {
            steps: 101,
            ..run
        };
        assert!(too_many.timesteps().is_err());
    }

    #[test]
    fn forward_diffuse_boundaries() {
        let s = schedule();
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let n = DVector::from_vec(vec![0.3, 0.4]);
        assert_eq!(forward_diffuse(&x, &s, 0, &n).unwrap(), x);
        let a = s.alpha_bar(10).unwrap();
        assert_eq!(forward_diffuse(&x, &s, 10, &DVector::zeros(2)).unwrap(), &x * a.sqrt());
        assert!(forward_diffuse(&x, &s, 10, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn tweedie_inverts_forward_diffusion() {
        let s = schedule();
        let x = DVector::from_vec(vec![0.7, -1.3, 2.2]);
        let n = DVector::from_vec(vec![-0.4, 0.9, 0.1]);
        for t in [1, 50, 500, 1000] {
            let xt = forward_diffuse(&x, &s, t, &n).unwrap();
            let back = tweedie_estimate(&xt, &n, &s, t).unwrap();
            assert!((back - &x).amax() < 1e-10);
        }
    }

    #[test]
    fn unit_gaussian_posterior_mean() {
        // E[x0 | x_t] = √ᾱ x_t for N(0, I) data; optimal ε̂ = √(1−ᾱ) x_t.
        let s = schedule();
        let xt = DVector::from_vec(vec![0.5, -0.2]);
        for t in [10, 300] {
            let a = s.alpha_bar(t).unwrap();
            let eps = &xt * (1.0 - a).sqrt();
            let est = tweedie_estimate(&xt, &eps, &s, t).unwrap();
            assert!((est - &xt * a.sqrt()).amax() < 1e-14);
        }
    }

    #[test]
    fn score_and_noise_forms_agree() {
        let s = schedule();
        let xt = DVector::from_vec(vec![0.5, -0.2, 3.0]);
        let eps = DVector::from_vec(vec![0.1, 0.7, -0.6]);
        let score = crate::scoremodel::score_from_noise(&eps, &s, 40).unwrap();
        let a = tweedie_estimate(&xt, &eps, &s, 40).unwrap();
        let b = tweedie_from_score(&xt, &score, &s, 40).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0));
        }
    }

    #[test]
    fn ddim_final_step_lands_on_reference() {
        let s = schedule();
        let z0 = DVector::from_vec(vec![0.25, -4.0]);
        let eps = DVector::from_vec(vec![1.0, 1.0]);
        let noise = DVector::from_vec(vec![5.0, -5.0]);
        for eta in [0.0, 1.0] {
            assert_eq!(ddim_step(&z0, &eps, &s, 1, 0, eta, &noise).unwrap(), z0);
            assert_eq!(ddim_step(&z0, &eps, &s, 10, 0, eta, &noise).unwrap(), z0);
        }
    }

    #[test]
    fn ddim_step_is_deterministic_at_eta_zero() {
        let s = schedule();
        let z0 = DVector::from_vec(vec![0.25, -4.0]);
        let eps = DVector::from_vec(vec![0.3, 0.1]);
        let a = ddim_step(&z0, &eps, &s, 50, 40, 0.0, &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let b = ddim_step(&z0, &eps, &s, 50, 40, 0.0, &DVector::from_vec(vec![-7.0, 3.0])).unwrap();
        assert_eq!(a, b);
        assert!(ddim_step(&z0, &eps, &s, 40, 50, 0.0, &eps).is_err());
    }

    #[test]
    fn pmg_identity_quadratic_step() {
        let chart = IdentityChart::new(2);
        let ext = PerceptualExtractor::none();
        let z = DVector::from_vec(vec![3.0, -1.0]);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        let upd = pmg_update(
            &z,
            &y,
            &ext,
            &chart,
            &GuidanceConfig {
                zeta1: 0.5,
                zeta2: 0.7,
                g2_point: G2Point::Tweedie,
            },
        )
        .unwrap();
        assert_eq!(upd.z_prime, y);
        assert_eq!(upd.z_double, y);
        assert_eq!(upd.g1, 8.0);
        assert_eq!(upd.g2, 0.0);
        let still = pmg_update(&z, &y, &ext, &chart, &GuidanceConfig::unguided()).unwrap();
        assert_eq!(still.z_prime, z);
        assert_eq!(still.z_double, z);
    }

    fn small_net(d: usize) -> ScoreNetwork {
        ScoreNetwork::new(
            d,
            1000,
            &ScoreNetConfig {
                hidden: vec![6, 5, 4, 3],
                ..ScoreNetConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn hyperfeature_counts() {
        let s = schedule();
        let net = small_net(3);
        let chart = LinearAutoencoder::new(LinearManifold::random(3, 1, 2).unwrap());
        let x = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let ext = PerceptualExtractor::none();
        for (steps, expected) in [(1, 4), (10, 40)] {
            let run = SamplerRunConfig {
                steps,
                ..SamplerRunConfig::default()
            };
            let out = lgdm_run(&x, &net, &chart, &ext, &s, &run, &GuidanceConfig::default()).unwrap();
            assert_eq!(out.taps().len(), expected);
            assert_eq!(out.trajectory.steps.len(), steps);
        }
    }

    #[test]
    fn unguided_run_matches_plain_ddim() {
        let s = schedule();
        let net = small_net(3);
        let chart = LinearAutoencoder::new(LinearManifold::random(3, 1, 2).unwrap());
        let x = DVector::from_vec(vec![0.1, -0.9, 0.3]);
        for eta in [0.0, 0.5] {
            for renoise in [true, false] {
                let run = SamplerRunConfig {
                    eta,
                    renoise,
                    seed: 17,
                    ..SamplerRunConfig::default()
                };
                let plain = ddim_sample(&x, &net, &s, &run).unwrap();
                let guided = lgdm_run(
                    &x,
                    &net,
                    &chart,
                    &PerceptualExtractor::identity().targeted(&x).unwrap(),
                    &s,
                    &run,
                    &GuidanceConfig::unguided(),
                )
                .unwrap();
                let states: Vec<DVector<f64>> =
                    guided.trajectory.states().into_iter().cloned().collect();
                assert_eq!(states, plain);
            }
        }
    }

    #[test]
    fn strict_mode_starts_clean() {
        let s = schedule();
        let net = small_net(3);
        let chart = LinearAutoencoder::new(LinearManifold::random(3, 1, 2).unwrap());
        let x = DVector::from_vec(vec![0.1, -0.9, 0.3]);
        let run = SamplerRunConfig {
            renoise: false,
            ..SamplerRunConfig::default()
        };
        let out = lgdm_run(&x, &net, &chart, &PerceptualExtractor::none(), &s, &run, &GuidanceConfig::default()).unwrap();
        assert_eq!(out.trajectory.steps[0].z_t, x);
        assert_eq!(out.trajectory.steps[0].t, 100);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = schedule();
        let net = small_net(3);
        let chart = LinearAutoencoder::new(LinearManifold::random(3, 1, 2).unwrap());
        let ext = PerceptualExtractor::none();
        let run = SamplerRunConfig::default();
        let bad = DVector::from_vec(vec![f64::NAN, 0.0, 0.0]);
        assert!(matches!(
            lgdm_run(&bad, &net, &chart, &ext, &s, &run, &GuidanceConfig::default()),
            Err(SamplerError::NonFinite { t: 0 })
        ));
        let neg = GuidanceConfig {
            zeta1: -1.0,
            ..GuidanceConfig::default()
        };
        let x = DVector::zeros(3);
        assert!(lgdm_run(&x, &net, &chart, &ext, &s, &run, &neg).is_err());
        let wide = SamplerRunConfig {
            t_range: (0, 2000),
            ..run
        };
        assert!(lgdm_run(&x, &net, &chart, &ext, &s, &wide, &GuidanceConfig::default()).is_err());
    }

    #[test]
    fn trajectory_dumps() {
        let s = schedule();
        let net = small_net(3);
        let chart = LinearAutoencoder::new(LinearManifold::random(3, 1, 2).unwrap());
        let run = SamplerRunConfig {
            steps: 3,
            ..SamplerRunConfig::default()
        };
        let y = DVector::from_vec(vec![0.5, 0.5, 0.5]);
        let out = lgdm_run(
            &y,
            &net,
            &chart,
            &PerceptualExtractor::identity().targeted(&y).unwrap(),
            &s,
            &run,
            &GuidanceConfig::default(),
        )
        .unwrap();
        let mut csv_bytes = Vec::new();
        out.trajectory.write_csv(&mut csv_bytes).unwrap();
        let text = String::from_utf8(csv_bytes).unwrap();
        assert!(text.starts_with("t,G1,G2,norm_z_t"));
        assert_eq!(text.lines().count(), 4);
        let mut bin = Vec::new();
        out.trajectory.write_states(&mut bin).unwrap();
        assert_eq!(&bin[..12], &[2, 0, 0, 0, 4, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bin.len(), 12 + 4 * 3 * 8);
    }
}
