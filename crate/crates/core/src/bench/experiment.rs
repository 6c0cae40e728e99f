//! Feature extraction over a benchmark, repeated split evaluation and the
//! ablation sweeps.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::benchmark::{generate_benchmark, BenchItem, Benchmark, SplitPlan};
use super::config::RunConfig;
use super::BenchError;
use crate::manifold::{sample_manifold_data, LatentGaussian, LinearAutoencoder, LinearManifold};
use crate::perceptual::PsiSpec;
use crate::quality::{aggregate, fit_head, median, select_ridge, CorrelationReport, HeadSpec, Hyperfeatures, Pooling, RIDGE_LAMBDA_GRID};
use crate::rng::derive_seed;
use crate::sampler::{lgdm_run, GuidanceConfig, SamplerError, SamplerRunConfig};
use crate::schedule::NoiseSchedule;
use crate::scoremodel::{train_dsm, ScoreNetwork};

/// Everything shared by the items of one experiment.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub schedule: NoiseSchedule,
    pub manifold: LinearManifold,
    pub latent: LatentGaussian,
    pub chart: LinearAutoencoder,
    pub net: Arc<ScoreNetwork>,
}

impl Pipeline {
    pub fn with_network(cfg: &RunConfig, net: ScoreNetwork) -> Result<Self, BenchError> {
        cfg.validate()?;
        let schedule = cfg.schedule.build().map_err(|e| BenchError::Config(e.to_string()))?;
        let (manifold, latent) = cfg.testbed.build().map_err(|e| BenchError::Config(e.to_string()))?;
        if net.state_dim() != manifold.ambient_dim() || net.step_count() != schedule.step_count() {
            return Err(BenchError::Config(format!(
                "score network ({} dims, T = {}) does not match the config ({} dims, T = {})",
                net.state_dim(),
                net.step_count(),
                manifold.ambient_dim(),
                schedule.step_count()
            )));
        }
        Ok(Self {
            chart: LinearAutoencoder::new(manifold.clone()),
            schedule,
            manifold,
            latent,
            net: Arc::new(net),
        })
    }

    /// Trains the score network described by the config. Returns the
    /// per-epoch loss curve alongside.
    pub fn train(cfg: &RunConfig) -> Result<(Self, Vec<f64>), BenchError> {
        cfg.validate()?;
        let schedule = cfg.schedule.build().map_err(|e| BenchError::Config(e.to_string()))?;
        let (manifold, latent) = cfg.testbed.build().map_err(|e| BenchError::Config(e.to_string()))?;
        let data = sample_manifold_data(&manifold, &latent, cfg.score.train_samples, cfg.score.data_seed)
            .map_err(|e| BenchError::Config(e.to_string()))?;
        let init = ScoreNetwork::new(manifold.ambient_dim(), schedule.step_count(), &cfg.score.net)
            .map_err(|e| BenchError::Config(e.to_string()))?;
        let (net, curve) = train_dsm(&init, &data, &schedule, &cfg.score.dsm).map_err(|e| match e {
            crate::scoremodel::ScoreError::Diverged { .. } => BenchError::Numerical(e.to_string()),
            other => BenchError::Config(other.to_string()),
        })?;
        Ok((Self::with_network(cfg, net)?, curve))
    }

    /// Loads the checkpoint named in the config, or `fallback` when the
    /// config names none.
    pub fn from_checkpoint(cfg: &RunConfig, fallback: Option<PathBuf>) -> Result<Self, BenchError> {
        let path = cfg
            .score
            .checkpoint
            .clone()
            .or(fallback)
            .ok_or_else(|| BenchError::Config("no score checkpoint configured".into()))?;
        if !path.exists() {
            return Err(BenchError::Config(format!(
                "missing score checkpoint {}; run train-score first",
                path.display()
            )));
        }
        let sidecar = path.with_extension("json");
        let (net, _) = ScoreNetwork::load(&path, &sidecar).map_err(|e| BenchError::Config(e.to_string()))?;
        Self::with_network(cfg, net)
    }
}

/// How features are produced for every item.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecipe {
    pub run: SamplerRunConfig,
    pub guidance: GuidanceConfig,
    pub psi: PsiSpec,
    pub pooling: Pooling,
}

impl FeatureRecipe {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            run: cfg.sampler.clone(),
            guidance: cfg.guidance.clone(),
            psi: cfg.psi.clone(),
            pooling: cfg.pooling,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatures {
    pub id: usize,
    pub hyper: Hyperfeatures,
    pub wall: Duration,
}

/// Outcome of extraction: usable items and ids aborted on a numerical
/// failure.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub items: Vec<ItemFeatures>,
    pub skipped: Vec<usize>,
}

impl FeatureSet {
    pub fn median_wall_ms(&self) -> f64 {
        let ms: Vec<f64> = self.items.iter().map(|i| i.wall.as_secs_f64() * 1e3).collect();
        median(&ms).unwrap_or(0.0)
    }

    /// Row matrix of `view(hyperfeatures)` for every usable item.
    pub fn matrix(
        &self,
        view: impl Fn(&Hyperfeatures) -> Result<DVector<f64>, BenchError>,
    ) -> Result<DMatrix<f64>, BenchError> {
        let rows: Vec<DVector<f64>> = self.items.iter().map(|i| view(&i.hyper)).collect::<Result<_, _>>()?;
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(BenchError::Numerical("feature width differs across items".into()));
        }
        Ok(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
    }

    pub fn pooled_matrix(&self) -> Result<DMatrix<f64>, BenchError> {
        self.matrix(|h| Ok(h.pooled().clone()))
    }
}

fn item_features(p: &Pipeline, item: &BenchItem, recipe: &FeatureRecipe) -> Result<Hyperfeatures, BenchError> {
    let run = SamplerRunConfig {
        seed: derive_seed(recipe.run.seed, item.id as u64),
        ..recipe.run.clone()
    };
    let mut extractor = recipe
        .psi
        .build(p.manifold.ambient_dim(), &p.net, &p.schedule, &run)
        .map_err(|e| BenchError::Config(e.to_string()))?;
    extractor
        .precompute_targets(&item.measurement)
        .map_err(|e| BenchError::Numerical(e.to_string()))?;
    let out = lgdm_run(
        &item.measurement,
        p.net.as_ref(),
        &p.chart,
        &extractor,
        &p.schedule,
        &run,
        &recipe.guidance,
    )
    .map_err(|e| match e {
        SamplerError::InvalidConfig(m) => BenchError::Config(m),
        other => BenchError::Numerical(other.to_string()),
    })?;
    let hyper = aggregate(&out.taps(), recipe.pooling).map_err(|e| BenchError::Numerical(e.to_string()))?;
    if !hyper.pooled().iter().all(|v| v.is_finite()) {
        return Err(BenchError::Numerical("non-finite hyperfeature".into()));
    }
    Ok(hyper)
}

/// Runs the guided sampler over every item. Items that hit a numerical
/// failure are skipped and their ids reported on stderr and in the result.
pub fn extract_features(p: &Pipeline, bench: &Benchmark, recipe: &FeatureRecipe) -> Result<FeatureSet, BenchError> {
    let mut items = Vec::with_capacity(bench.items.len());
    let mut skipped = Vec::new();
    for item in &bench.items {
        let start = Instant::now();
        match item_features(p, item, recipe) {
            Ok(hyper) => items.push(ItemFeatures {
                id: item.id,
                hyper,
                wall: start.elapsed(),
            }),
            Err(BenchError::Numerical(msg)) => {
                eprintln!("item {} aborted: {msg}", item.id);
                skipped.push(item.id);
            }
            Err(e) => return Err(e),
        }
    }
    if items.is_empty() {
        return Err(BenchError::Numerical("every item failed feature extraction".into()));
    }
    Ok(FeatureSet { items, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    /// Ridge penalty picked on the validation split.
    pub lambda: Option<f64>,
    pub plcc: f64,
    pub srcc: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub repeats: Vec<RepeatResult>,
    pub median_plcc: f64,
    pub median_srcc: f64,
    /// Per usable item, the mean test prediction over the repeats that
    /// placed it in the test split.
    pub predictions: Vec<Option<f64>>,
}

fn rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

fn pick(y: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| y[i]).collect()
}

/// Fits and scores a head on every repeat of `plan`. Rows of `x` are
/// items; `content` and `y` are aligned with them.
pub fn evaluate(
    x: &DMatrix<f64>,
    y: &[f64],
    content: &[usize],
    plan: &SplitPlan,
    head: &HeadSpec,
) -> Result<EvalSummary, BenchError> {
    let mut repeats = Vec::with_capacity(plan.repeats);
    let mut sums = vec![(0.0, 0usize); y.len()];
    for r in 0..plan.repeats {
        let split = plan.split(content, r)?;
        let (xt, yt) = (rows(x, &split.train), pick(y, &split.train));
        let (fitted, lambda) = match head {
            HeadSpec::Ridge { .. } => {
                let (h, l) = select_ridge(&xt, &yt, &rows(x, &split.val), &pick(y, &split.val), &RIDGE_LAMBDA_GRID)?;
                (h, Some(l))
            }
            HeadSpec::Mlp { .. } => (fit_head(&xt, &yt, head)?, None),
        };
        let pred = fitted.predict_rows(&rows(x, &split.test))?;
        let truth = pick(y, &split.test);
        let report = CorrelationReport::compute(&pred, &truth)?;
        for (&i, &p) in split.test.iter().zip(&pred) {
            sums[i].0 += p;
            sums[i].1 += 1;
        }
        repeats.push(RepeatResult {
            repeat: r,
            lambda,
            plcc: report.plcc,
            srcc: report.srcc,
            n_test: report.n,
        });
    }
    let med = |f: fn(&RepeatResult) -> f64| median(&repeats.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    Ok(EvalSummary {
        median_plcc: med(|r| r.plcc),
        median_srcc: med(|r| r.srcc),
        predictions: sums.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect(),
        repeats,
    })
}

/// Labels and grouping of the usable items of a feature set.
pub fn targets(bench: &Benchmark, features: &FeatureSet) -> (Vec<f64>, Vec<usize>) {
    features
        .items
        .iter()
        .map(|f| {
            let item = &bench.items[f.id];
            (item.true_quality, item.content_id)
        })
        .unzip()
}

/// Evaluates `view` of the features under the config's head and splits.
pub fn evaluate_view(
    bench: &Benchmark,
    features: &FeatureSet,
    cfg: &RunConfig,
    view: impl Fn(&Hyperfeatures) -> Result<DVector<f64>, BenchError>,
) -> Result<EvalSummary, BenchError> {
    let (y, content) = targets(bench, features);
    evaluate(&features.matrix(view)?, &y, &content, &cfg.split, &cfg.head)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub t: usize,
    pub layer: usize,
    pub median_plcc: f64,
    pub median_srcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub n_items: usize,
    pub skipped_items: Vec<usize>,
    pub feature_dim: usize,
    pub median_plcc: f64,
    pub median_srcc: f64,
    pub repeats: Vec<RepeatResult>,
    /// Final-timestep, last-layer features only.
    pub baseline: BaselineSummary,
    pub wall_ms_per_item_median: f64,
}

/// Single-block view at the lowest timestep and deepest tapped layer.
pub fn final_block(h: &Hyperfeatures) -> (usize, usize) {
    let t = *h.timesteps().iter().next().expect("non-empty");
    let layer = *h.layers().iter().next_back().expect("non-empty");
    (t, layer)
}

pub struct ExperimentOutput {
    pub benchmark: Benchmark,
    pub features: FeatureSet,
    pub summary: EvalSummary,
    pub report: ExperimentReport,
}

/// Full protocol: generate the benchmark, extract hyperfeatures, evaluate
/// over repeated content splits and compare with the single-block baseline.
pub fn run_experiment(p: &Pipeline, cfg: &RunConfig) -> Result<ExperimentOutput, BenchError> {
    cfg.validate()?;
    let bench = generate_benchmark(&cfg.benchmark, &p.manifold, &p.latent)?;
    let features = extract_features(p, &bench, &FeatureRecipe::from_config(cfg))?;
    let summary = evaluate_view(&bench, &features, cfg, |h| Ok(h.pooled().clone()))?;
    let (t, layer) = final_block(&features.items[0].hyper);
    let base = evaluate_view(&bench, &features, cfg, |h| {
        h.get(t, layer)
            .cloned()
            .ok_or_else(|| BenchError::Numerical(format!("missing tap ({t}, {layer})")))
    })?;
    let report = ExperimentReport {
        config_hash: cfg.hash(),
        seed: cfg.sampler.seed,
        n_items: bench.items.len(),
        skipped_items: features.skipped.clone(),
        feature_dim: features.items[0].hyper.pooled().len(),
        median_plcc: summary.median_plcc,
        median_srcc: summary.median_srcc,
        repeats: summary.repeats.clone(),
        baseline: BaselineSummary {
            t,
            layer,
            median_plcc: base.median_plcc,
            median_srcc: base.median_srcc,
        },
        wall_ms_per_item_median: features.median_wall_ms(),
    };
    Ok(ExperimentOutput {
        benchmark: bench,
        features,
        summary,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Zeta2,
    Steps,
    TimeRange,
    Layers,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Zeta2 => "zeta2",
            Ablation::Steps => "steps",
            Ablation::TimeRange => "time-range",
            Ablation::Layers => "layers",
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            Ablation::Zeta2 => "ablation_zeta2",
            Ablation::Steps => "ablation_steps",
            Ablation::TimeRange => "ablation_time_range",
            Ablation::Layers => "ablation_layers",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Swept value as written in the output, e.g. `0.2`, `(0,100]`, `all`.
    pub setting: String,
    pub plcc: f64,
    pub srcc: f64,
    /// Median per-item extraction time; excluded from reproducibility.
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub which: Ablation,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }
}

pub const ZETA2_VALUES: [f64; 5] = [0.0, 0.2, 0.5, 0.7, 1.0];
pub const STEP_VALUES: [usize; 4] = [1, 5, 10, 50];

/// Equal-width buckets starting at the configured range and sliding toward
/// larger `t` by twice the width.
pub fn default_buckets(cfg: &RunConfig) -> Vec<(usize, usize)> {
    let (lo, hi) = cfg.sampler.t_range;
    let width = hi - lo;
    (0..5)
        .map(|i| (lo + 2 * i * width, hi + 2 * i * width))
        .filter(|&(_, h)| h <= cfg.schedule.steps)
        .collect()
}

pub fn bucket_label((lo, hi): (usize, usize)) -> String {
    format!("({lo},{hi}]")
}

fn table(cfg: &RunConfig, which: Ablation, rows: Vec<AblationRow>) -> AblationTable {
    AblationTable {
        which,
        config_hash: cfg.hash(),
        seed: cfg.sampler.seed,
        rows,
    }
}

fn sweep_row(
    p: &Pipeline,
    bench: &Benchmark,
    cfg: &RunConfig,
    recipe: &FeatureRecipe,
    setting: String,
    timed: bool,
) -> Result<AblationRow, BenchError> {
    let features = extract_features(p, bench, recipe)?;
    let s = evaluate_view(bench, &features, cfg, |h| Ok(h.pooled().clone()))?;
    Ok(AblationRow {
        setting,
        plcc: s.median_plcc,
        srcc: s.median_srcc,
        wall_ms: timed.then(|| features.median_wall_ms()),
    })
}

pub fn ablate_zeta2(p: &Pipeline, bench: &Benchmark, cfg: &RunConfig, values: &[f64]) -> Result<AblationTable, BenchError> {
    let base = FeatureRecipe::from_config(cfg);
    let rows = values
        .iter()
        .map(|&z| {
            let mut recipe = base.clone();
            recipe.guidance.zeta2 = z;
            sweep_row(p, bench, cfg, &recipe, z.to_string(), false)
        })
        .collect::<Result<_, _>>()?;
    Ok(table(cfg, Ablation::Zeta2, rows))
}

pub fn ablate_steps(p: &Pipeline, bench: &Benchmark, cfg: &RunConfig, values: &[usize]) -> Result<AblationTable, BenchError> {
    let base = FeatureRecipe::from_config(cfg);
    let rows = values
        .iter()
        .map(|&n| {
            let mut recipe = base.clone();
            recipe.run.steps = n;
            sweep_row(p, bench, cfg, &recipe, n.to_string(), true)
        })
        .collect::<Result<_, _>>()?;
    Ok(table(cfg, Ablation::Steps, rows))
}

pub fn ablate_time_range(
    p: &Pipeline,
    bench: &Benchmark,
    cfg: &RunConfig,
    buckets: &[(usize, usize)],
) -> Result<AblationTable, BenchError> {
    let base = FeatureRecipe::from_config(cfg);
    let rows = buckets
        .iter()
        .map(|&b| {
            let mut recipe = base.clone();
            recipe.run.t_range = b;
            recipe.run.steps = recipe.run.steps.min(b.1.saturating_sub(b.0));
            sweep_row(p, bench, cfg, &recipe, bucket_label(b), false)
        })
        .collect::<Result<_, _>>()?;
    Ok(table(cfg, Ablation::TimeRange, rows))
}

/// Features from every selected timestep, one tapped layer at a time, then
/// all layers together (row `all`).
pub fn ablate_layers(p: &Pipeline, bench: &Benchmark, cfg: &RunConfig) -> Result<AblationTable, BenchError> {
    let recipe = FeatureRecipe::from_config(cfg);
    let features = extract_features(p, bench, &recipe)?;
    let layers: BTreeSet<usize> = p.net.tap_layers().clone();
    let mut rows = Vec::with_capacity(layers.len() + 1);
    for &l in &layers {
        let only: BTreeSet<usize> = [l].into();
        let s = evaluate_view(bench, &features, cfg, |h| {
            Ok(h.restrict_layers(&only)
                .map_err(|e| BenchError::Numerical(e.to_string()))?
                .pooled()
                .clone())
        })?;
        rows.push(AblationRow {
            setting: l.to_string(),
            plcc: s.median_plcc,
            srcc: s.median_srcc,
            wall_ms: None,
        });
    }
    let all = evaluate_view(bench, &features, cfg, |h| Ok(h.pooled().clone()))?;
    rows.push(AblationRow {
        setting: "all".into(),
        plcc: all.median_plcc,
        srcc: all.median_srcc,
        wall_ms: None,
    });
    Ok(table(cfg, Ablation::Layers, rows))
}

/// Dispatches to the default sweep of `which`.
pub fn run_ablation(p: &Pipeline, cfg: &RunConfig, which: Ablation) -> Result<AblationTable, BenchError> {
    let bench = generate_benchmark(&cfg.benchmark, &p.manifold, &p.latent)?;
    match which {
        Ablation::Zeta2 => ablate_zeta2(p, &bench, cfg, &ZETA2_VALUES),
        Ablation::Steps => ablate_steps(p, &bench, cfg, &STEP_VALUES),
        Ablation::TimeRange => ablate_time_range(p, &bench, cfg, &default_buckets(cfg)),
        Ablation::Layers => ablate_layers(p, &bench, cfg),
    }
}
