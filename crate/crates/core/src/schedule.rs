//! Discrete variance-preserving noise schedules and the DDPM/DDIM step
//! coefficients derived from them.
//!
//! Timesteps are 1-based: `t ∈ {1..T}`. Index `t = 0` denotes the clean,
//! pre-diffusion sample and carries `ᾱ_0 = 1`, so the final backward update
//! lands exactly on the clean estimate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("step count must be at least 1")]
    ZeroSteps,
    #[error("beta bounds must satisfy 0 < beta_min <= beta_max < 1, got ({0}, {1})")]
    InvalidBetaRange(f64, f64),
    #[error("beta at index {index} is {value}, expected a finite value in (0, 1)")]
    InvalidBeta { index: usize, value: f64 },
    #[error("timestep {t} outside 1..={max}")]
    OutOfRange { t: usize, max: usize },
    #[error("timestep 1 has no predecessor for the DDIM variance; the final step uses the alpha_bar_0 = 1 contract")]
    Boundary,
    #[error("eta must be finite and in [0, 1], got {0}")]
    InvalidEta(f64),
    #[error("sigma^2 = {sigma_sq} exceeds 1 - alpha_bar_prev = {budget}; noise coefficient would be imaginary")]
    ImaginaryCoefficient { sigma_sq: f64, budget: f64 },
    #[error("previous timestep {prev} must be below {t}")]
    NotDescending { t: usize, prev: usize },
}

/// Serialized form used inside run configs. Never persisted expanded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, ScheduleError> {
        build_linear_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

/// Immutable β/α/ᾱ tables for `T` discrete steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    config: Option<ScheduleConfig>,
}

/// Linear betas from `beta_min` to `beta_max` inclusive.
pub fn build_linear_schedule(
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule, ScheduleError> {
    if steps == 0 {
        return Err(ScheduleError::ZeroSteps);
    }
    let valid = beta_min.is_finite()
        && beta_max.is_finite()
        && beta_min > 0.0
        && beta_min <= beta_max
        && beta_max < 1.0;
    if !valid {
        return Err(ScheduleError::InvalidBetaRange(beta_min, beta_max));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_min]
    } else {
        let span = beta_max - beta_min;
        (0..steps)
            .map(|i| beta_min + span * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let mut schedule = NoiseSchedule::from_betas(betas)?;
    schedule.config = Some(ScheduleConfig {
        steps,
        beta_min,
        beta_max,
    });
    Ok(schedule)
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas, each in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, ScheduleError> {
        if betas.is_empty() {
            return Err(ScheduleError::ZeroSteps);
        }
        for (index, &value) in betas.iter().enumerate() {
            if !(value.is_finite() && value > 0.0 && value < 1.0) {
                return Err(ScheduleError::InvalidBeta { index, value });
            }
        }
        Ok(Self::from_betas_unchecked(betas))
    }

    /// Skips the `beta > 0` check. Only for hand-built degenerate schedules
    /// (e.g. flat segments where `ᾱ_t = ᾱ_{t-1}`).
    pub fn from_betas_unchecked(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
            config: None,
        }
    }

    pub fn step_count(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// The linear-schedule parameters, when the schedule was built from them.
    pub fn config(&self) -> Option<ScheduleConfig> {
        self.config
    }

    fn check(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.step_count() {
            Err(ScheduleError::OutOfRange {
                t,
                max: self.step_count(),
            })
        } else {
            Ok(())
        }
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64, ScheduleError> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// `ᾱ_t` for `t ∈ 0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, ScheduleError> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Posterior (DDPM) variance `β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64, ScheduleError> {
        let beta = self.beta(t)?;
        let prev = self.alpha_bar(t - 1)?;
        let cur = self.alpha_bar(t)?;
        Ok(beta * (1.0 - prev) / (1.0 - cur))
    }
}

/// DDIM noise scale between consecutive steps `t` and `t − 1`.
///
/// `t = 1` is rejected with [`ScheduleError::Boundary`]; the sampler handles
/// the last step through `ᾱ_0 = 1`, which forces `σ = 0`.
pub fn ddim_sigma(s: &NoiseSchedule, t: usize, eta: f64) -> Result<f64, ScheduleError> {
    check_eta(eta)?;
    if t == 1 {
        return Err(ScheduleError::Boundary);
    }
    s.check(t)?;
    ddim_sigma_between(s, t, t - 1, eta)
}

/// DDIM noise scale for a strided jump `t → prev` (`prev < t`, `prev` may be 0).
pub fn ddim_sigma_between(
    s: &NoiseSchedule,
    t: usize,
    prev: usize,
    eta: f64,
) -> Result<f64, ScheduleError> {
    check_eta(eta)?;
    if prev >= t {
        return Err(ScheduleError::NotDescending { t, prev });
    }
    let cur = s.alpha_bar(t)?;
    let before = s.alpha_bar(prev)?;
    if eta == 0.0 {
        return Ok(0.0);
    }
    let first = ((1.0 - before) / (1.0 - cur)).sqrt();
    let second = (1.0 - cur / before).max(0.0).sqrt();
    Ok(eta * first * second)
}

fn check_eta(eta: f64) -> Result<(), ScheduleError> {
    if eta.is_finite() && (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(ScheduleError::InvalidEta(eta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerMode {
    Ddpm,
    Ddim { eta: f64 },
}

/// Noise-form coefficients of one backward step:
/// `x_{k−1} = u·x̂₀ + v·ε̂ + w·ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerCoefficients {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub mode: SamplerMode,
}

pub fn sampler_coefficients(
    s: &NoiseSchedule,
    k: usize,
    mode: SamplerMode,
) -> Result<SamplerCoefficients, ScheduleError> {
    s.check(k)?;
    let prev = s.alpha_bar(k - 1)?;
    let w = match mode {
        SamplerMode::Ddpm => {
            let cur = s.alpha_bar(k)?;
            s.beta(k)?.sqrt() * ((1.0 - prev) / (1.0 - cur)).sqrt()
        }
        SamplerMode::Ddim { eta } => ddim_sigma_between(s, k, k - 1, eta)?,
    };
    let v = noise_coefficient(prev, w)?;
    Ok(SamplerCoefficients {
        u: prev.sqrt(),
        v,
        w,
        mode,
    })
}

/// `√(1 − ᾱ_prev − σ²)`, rejecting an imaginary result. Rounding residue
/// below 1e-14 is clamped to zero.
pub fn noise_coefficient(alpha_bar_prev: f64, sigma: f64) -> Result<f64, ScheduleError> {
    let budget = 1.0 - alpha_bar_prev;
    let sigma_sq = sigma * sigma;
    let rem = budget - sigma_sq;
    if rem < 0.0 {
        if rem > -1e-14 {
            return Ok(0.0);
        }
        return Err(ScheduleError::ImaginaryCoefficient { sigma_sq, budget });
    }
    Ok(rem.sqrt())
}
