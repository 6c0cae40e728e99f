//! The single JSON document that configures training, sampling, features,
//! regression and the benchmark.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::benchmark::{BenchmarkSpec, SplitPlan};
use super::BenchError;
use crate::manifold::{CovarianceSpec, TestbedSpec};
use crate::perceptual::PsiSpec;
use crate::quality::{HeadSpec, Pooling};
use crate::sampler::{GuidanceConfig, SamplerRunConfig};
use crate::schedule::ScheduleConfig;
use crate::scoremodel::{DsmConfig, ScoreNetConfig};

/// Score network architecture, training recipe and checkpoint location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSection {
    pub net: ScoreNetConfig,
    pub dsm: DsmConfig,
    /// Clean manifold samples used for training.
    pub train_samples: usize,
    pub data_seed: u64,
    /// `PMGL` file; the JSON sidecar sits next to it with a `.json`
    /// extension. Relative paths resolve against the config file.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self {
            net: ScoreNetConfig {
                hidden: vec![32; 4],
                ..ScoreNetConfig::default()
            },
            dsm: DsmConfig {
                epochs: 400,
                ..DsmConfig::full_range(1000)
            },
            train_samples: 4096,
            data_seed: 1,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub testbed: TestbedSpec,
    pub score: ScoreSection,
    pub sampler: SamplerRunConfig,
    pub guidance: GuidanceConfig,
    pub psi: PsiSpec,
    pub head: HeadSpec,
    #[serde(default)]
    pub pooling: Pooling,
    pub benchmark: BenchmarkSpec,
    pub split: SplitPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            testbed: TestbedSpec {
                latent_mean: vec![0.0; 12],
                latent_cov: CovarianceSpec::Isotropic(400.0),
                ..TestbedSpec::standard(32, 12, 7)
            },
            score: ScoreSection::default(),
            sampler: SamplerRunConfig::default(),
            guidance: GuidanceConfig::default(),
            psi: PsiSpec::default(),
            head: HeadSpec::default(),
            pooling: Pooling::Concat,
            benchmark: BenchmarkSpec::default(),
            split: SplitPlan::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        serde_json::from_str(text).map_err(|e| BenchError::Config(format!("config: {e}")))
    }

    /// Reads a config file; a relative checkpoint path is resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(ckpt), Some(dir)) = (cfg.score.checkpoint.as_mut(), path.parent()) {
            if ckpt.is_relative() {
                *ckpt = dir.join(&*ckpt);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(compact.as_bytes())[..8])
    }

    /// Sets every seed that the CLI `--seed` flag controls.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sampler.seed = seed;
        self.split.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        self.benchmark.validate()?;
        self.split.validate()?;
        self.sampler
            .timesteps()
            .map_err(|e| BenchError::Config(e.to_string()))?;
        if self.sampler.t_range.1 > self.schedule.steps {
            return Err(BenchError::Config(format!(
                "sampler range top {} exceeds T = {}",
                self.sampler.t_range.1, self.schedule.steps
            )));
        }
        if self.testbed.ambient_dim <= self.testbed.k || self.testbed.k == 0 {
            return Err(BenchError::Config("testbed needs 0 < k < D".into()));
        }
        for z in [self.guidance.zeta1, self.guidance.zeta2] {
            if !(z.is_finite() && z >= 0.0) {
                return Err(BenchError::Config(format!("guidance weight {z} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}
