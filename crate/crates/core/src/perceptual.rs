//! Perceptual feature extractors and the two guidance losses.
//!
//! `G1(c) = ‖decode(c) − y‖²` and `G2(c) = ‖ψ(decode(c)) − ψ(y)‖²`, both
//! differentiated with respect to latent coordinates `c` of a chart.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::{standardize, Activation, ComputationTape, DenseArray, EngineError, Mlp, Var};
use crate::manifold::LinearAutoencoder;
use crate::rng::{normal_vector, seeded};
use crate::sampler::{lgdm_run, ChainNoise, GuidanceConfig, SamplerError, SamplerRunConfig};
use crate::schedule::{ddim_sigma_between, noise_coefficient, NoiseSchedule, ScheduleError};
use crate::scoremodel::{ScoreError, ScoreNetwork};

#[derive(Debug, Error)]
pub enum PerceptualError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("perceptual targets not precomputed")]
    MissingTargets,
    #[error("non-finite guidance gradient")]
    NonFiniteGradient,
    #[error("invalid extractor: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("unguided feature pass failed: {0}")]
    Sampler(String),
}

impl From<SamplerError> for PerceptualError {
    fn from(e: SamplerError) -> Self {
        PerceptualError::Sampler(e.to_string())
    }
}

/// Latent coordinates for an ambient space.
pub trait LatentChart {
    fn ambient_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn encode(&self, x: &DVector<f64>) -> DVector<f64>;
    fn decode(&self, c: &DVector<f64>) -> DVector<f64>;
    /// Differential of `decode` applied to a latent direction.
    fn decode_direction(&self, dc: &DVector<f64>) -> DVector<f64>;
    /// Transpose of the decoder differential applied to an ambient cotangent.
    fn pullback(&self, g: &DVector<f64>) -> DVector<f64>;
}

impl LatentChart for LinearAutoencoder {
    fn ambient_dim(&self) -> usize {
        self.manifold().ambient_dim()
    }

    fn latent_dim(&self) -> usize {
        self.manifold().intrinsic_dim()
    }

    fn encode(&self, x: &DVector<f64>) -> DVector<f64> {
        LinearAutoencoder::encode(self, x)
    }

    fn decode(&self, c: &DVector<f64>) -> DVector<f64> {
        LinearAutoencoder::decode(self, c)
    }

    fn decode_direction(&self, dc: &DVector<f64>) -> DVector<f64> {
        LinearAutoencoder::decode_direction(self, dc)
    }

    fn pullback(&self, g: &DVector<f64>) -> DVector<f64> {
        LinearAutoencoder::pullback(self, g)
    }
}

/// The trivial chart `encode = decode = id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityChart {
    dim: usize,
}

impl IdentityChart {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl LatentChart for IdentityChart {
    fn ambient_dim(&self) -> usize {
        self.dim
    }

    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn decode(&self, c: &DVector<f64>) -> DVector<f64> {
        c.clone()
    }

    fn decode_direction(&self, dc: &DVector<f64>) -> DVector<f64> {
        dc.clone()
    }

    fn pullback(&self, g: &DVector<f64>) -> DVector<f64> {
        g.clone()
    }
}

/// Self-features of a score network: taps collected by a guidance-free
/// sampling pass over the input.
#[derive(Debug, Clone)]
pub struct ScoreFeatures {
    pub net: Arc<ScoreNetwork>,
    pub schedule: NoiseSchedule,
    pub run: SamplerRunConfig,
    pub normalize_blocks: bool,
}

#[derive(Debug, Clone)]
pub enum ExtractorKind {
    None,
    Identity,
    /// `ψ(x) = M x`, `M` of shape `p × D`.
    Linear(DMatrix<f64>),
    Mlp(Mlp),
    ScoreFeatures(ScoreFeatures),
}

impl ExtractorKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExtractorKind::None => "none",
            ExtractorKind::Identity => "identity",
            ExtractorKind::Linear(_) => "linear",
            ExtractorKind::Mlp(_) => "mlp",
            ExtractorKind::ScoreFeatures(_) => "scorenet-features",
        }
    }
}

/// A feature map `ψ` plus the cached `ψ(y)` of the current measurement.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    kind: ExtractorKind,
    target: Option<DVector<f64>>,
}

fn to_array(v: &DVector<f64>) -> DenseArray {
    DenseArray::vector(v.as_slice().to_vec())
}

fn to_vector(a: &DenseArray) -> DVector<f64> {
    DVector::from_column_slice(a.data())
}

impl PerceptualExtractor {
    pub fn new(kind: ExtractorKind) -> Self {
        Self { kind, target: None }
    }

    pub fn none() -> Self {
        Self::new(ExtractorKind::None)
    }

    pub fn identity() -> Self {
        Self::new(ExtractorKind::Identity)
    }

    pub fn linear(m: DMatrix<f64>) -> Self {
        Self::new(ExtractorKind::Linear(m))
    }

    pub fn mlp(net: Mlp) -> Self {
        Self::new(ExtractorKind::Mlp(net))
    }

    pub fn score_features(features: ScoreFeatures) -> Self {
        Self::new(ExtractorKind::ScoreFeatures(features))
    }

    pub fn kind(&self) -> &ExtractorKind {
        &self.kind
    }

    pub fn target(&self) -> Option<&DVector<f64>> {
        self.target.as_ref()
    }

    /// Drops the cached target; the extractor must be re-targeted before
    /// the next guided step.
    pub fn clear_target(&mut self) {
        self.target = None;
    }

    /// `ψ(x)` as one flat vector.
    pub fn features(&self, x: &DVector<f64>) -> Result<DVector<f64>, PerceptualError> {
        match &self.kind {
            ExtractorKind::None => Ok(DVector::zeros(0)),
            ExtractorKind::Identity => Ok(x.clone()),
            ExtractorKind::Linear(m) => {
                if m.ncols() != x.len() {
                    return Err(PerceptualError::ShapeMismatch {
                        expected: m.ncols(),
                        got: x.len(),
                    });
                }
                Ok(m * x)
            }
            ExtractorKind::Mlp(net) => {
                if net.input_dim() != x.len() {
                    return Err(PerceptualError::ShapeMismatch {
                        expected: net.input_dim(),
                        got: x.len(),
                    });
                }
                Ok(to_vector(&net.forward(&to_array(x), false)?.output))
            }
            ExtractorKind::ScoreFeatures(sf) => score_features_plain(sf, x),
        }
    }

    /// Caches `ψ(y)` for the measurement `y`.
    pub fn precompute_targets(&mut self, y: &DVector<f64>) -> Result<(), PerceptualError> {
        self.target = Some(self.features(y)?);
        Ok(())
    }

    /// Builder form of [`Self::precompute_targets`].
    pub fn targeted(mut self, y: &DVector<f64>) -> Result<Self, PerceptualError> {
        self.precompute_targets(y)?;
        Ok(self)
    }

    /// `ψ(x)` and the vector-Jacobian product `J_ψ(x)ᵀ·cot`, where `cot` is
    /// computed from `ψ(x)` by `seed`.
    fn features_vjp(
        &self,
        x: &DVector<f64>,
        seed: impl FnOnce(&DVector<f64>) -> DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), PerceptualError> {
        match &self.kind {
            ExtractorKind::None => Ok((DVector::zeros(0), DVector::zeros(x.len()))),
            ExtractorKind::Identity => {
                let f = x.clone();
                let g = seed(&f);
                Ok((f, g))
            }
            ExtractorKind::Linear(m) => {
                let f = self.features(x)?;
                let g = m.transpose() * seed(&f);
                Ok((f, g))
            }
            ExtractorKind::Mlp(net) => {
                let mut tape = ComputationTape::new();
                let input = tape.leaf(to_array(x));
                let params = net.register(&mut tape);
                let out = net.apply_on_tape(&mut tape, &params, input)?.output;
                tape_vjp(&tape, out, input, seed)
            }
            ExtractorKind::ScoreFeatures(sf) => {
                let mut tape = ComputationTape::new();
                let input = tape.leaf(to_array(x));
                let out = score_features_on_tape(sf, &mut tape, input)?;
                tape_vjp(&tape, out, input, seed)
            }
        }
    }

    /// Reverse-mode VJP for every kind, linear included. Reference path for
    /// the closed forms used by [`Self::features_vjp`].
    pub fn vjp_on_tape(
        &self,
        x: &DVector<f64>,
        cot: &DVector<f64>,
    ) -> Result<DVector<f64>, PerceptualError> {
        let mut tape = ComputationTape::new();
        let input = tape.leaf(to_array(x));
        let out = match &self.kind {
            ExtractorKind::None => return Ok(DVector::zeros(x.len())),
            ExtractorKind::Identity => tape.scale(input, 1.0),
            ExtractorKind::Linear(m) => {
                let w = tape.leaf(DenseArray::matrix(
                    m.nrows(),
                    m.ncols(),
                    m.transpose().as_slice().to_vec(),
                )?);
                let b = tape.leaf(DenseArray::zeros(&[m.nrows()]));
                tape.affine(input, w, b)?
            }
            ExtractorKind::Mlp(net) => {
                let params = net.register(&mut tape);
                net.apply_on_tape(&mut tape, &params, input)?.output
            }
            ExtractorKind::ScoreFeatures(sf) => score_features_on_tape(sf, &mut tape, input)?,
        };
        Ok(tape_vjp(&tape, out, input, |_| cot.clone())?.1)
    }
}

fn tape_vjp(
    tape: &ComputationTape,
    out: Var,
    input: Var,
    seed: impl FnOnce(&DVector<f64>) -> DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), PerceptualError> {
    let f = to_vector(tape.value(out));
    let cot = seed(&f);
    let grads = tape.backward_from(out, &DenseArray::vector(cot.as_slice().to_vec()))?;
    let g = to_vector(&grads.get_or_zeros(input, tape.value(input)));
    Ok((f, g))
}

fn score_features_plain(sf: &ScoreFeatures, x: &DVector<f64>) -> Result<DVector<f64>, PerceptualError> {
    let out = lgdm_run(
        x,
        sf.net.as_ref(),
        &IdentityChart::new(x.len()),
        &PerceptualExtractor::none(),
        &sf.schedule,
        &sf.run,
        &GuidanceConfig::unguided(),
    )?;
    let mut flat = Vec::new();
    for tap in out.taps() {
        if sf.normalize_blocks {
            flat.extend_from_slice(standardize(&to_array(&tap.values)).data());
        } else {
            flat.extend(tap.values.iter());
        }
    }
    Ok(DVector::from_vec(flat))
}

/// Records the guidance-free sampling pass on `tape` with the same
/// arithmetic, in the same order, as the plain sampler, so the forward value
/// equals [`score_features_plain`] bitwise.
fn score_features_on_tape(
    sf: &ScoreFeatures,
    tape: &mut ComputationTape,
    input: Var,
) -> Result<Var, PerceptualError> {
    let dim = tape.value(input).len();
    if dim != sf.net.state_dim() {
        return Err(PerceptualError::ShapeMismatch {
            expected: sf.net.state_dim(),
            got: dim,
        });
    }
    let s = &sf.schedule;
    let ts = sf.run.timesteps()?;
    if ts[0] > s.step_count() {
        return Err(PerceptualError::Invalid(format!(
            "feature pass timestep {} exceeds T = {}",
            ts[0],
            s.step_count()
        )));
    }
    let noise = ChainNoise::draw(sf.run.seed, dim, ts.len());
    let params = sf.net.register(tape);
    let mut z = if sf.run.renoise {
        let a = s.alpha_bar(ts[0])?;
        let scaled = tape.scale(input, a.sqrt());
        let n = tape.leaf(to_array(&(&noise.start * (1.0 - a).sqrt())));
        tape.add(scaled, n)?
    } else {
        input
    };
    let mut blocks = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let vars = sf.net.apply_on_tape(tape, &params, z, t)?;
        for &tap in vars.taps.values() {
            blocks.push(if sf.normalize_blocks {
                tape.standardize(tap)
            } else {
                tap
            });
        }
        let a = s.alpha_bar(t)?;
        let eps_scaled = tape.scale(vars.eps, (1.0 - a).sqrt());
        let diff = tape.sub(z, eps_scaled)?;
        let z0 = tape.scale(diff, 1.0 / a.sqrt());
        let sigma = ddim_sigma_between(s, t, prev, sf.run.eta)?;
        let prev_bar = s.alpha_bar(prev)?;
        let v = noise_coefficient(prev_bar, sigma)?;
        let lhs = tape.scale(z0, prev_bar.sqrt());
        let mid = tape.scale(vars.eps, v);
        let sum = tape.add(lhs, mid)?;
        let n = tape.leaf(to_array(&(&noise.steps[i] * sigma)));
        z = tape.add(sum, n)?;
    }
    if blocks.is_empty() {
        return Err(PerceptualError::Invalid("score network has no tap layers".into()));
    }
    Ok(tape.concat(&blocks)?)
}

/// Losses and gradient norms of one guided step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceLossReport {
    pub g1: f64,
    pub g2: f64,
    pub grad1_norm: f64,
    pub grad2_norm: f64,
}

/// `G1 = ‖decode(c) − y‖²` and its latent gradient `2·Jᵀ(decode(c) − y)`.
pub fn g1_value_grad(
    c: &DVector<f64>,
    y: &DVector<f64>,
    chart: &dyn LatentChart,
) -> Result<(f64, DVector<f64>), PerceptualError> {
    if c.len() != chart.latent_dim() {
        return Err(PerceptualError::ShapeMismatch {
            expected: chart.latent_dim(),
            got: c.len(),
        });
    }
    if y.len() != chart.ambient_dim() {
        return Err(PerceptualError::ShapeMismatch {
            expected: chart.ambient_dim(),
            got: y.len(),
        });
    }
    let r = chart.decode(c) - y;
    Ok((r.norm_squared(), chart.pullback(&(r * 2.0))))
}

/// `G2 = ‖ψ(decode(c)) − ψ(y)‖²` against the cached target, with its latent
/// gradient. Always `(0, 0)` for the `none` kind.
pub fn g2_value_grad(
    c: &DVector<f64>,
    extractor: &PerceptualExtractor,
    chart: &dyn LatentChart,
) -> Result<(f64, DVector<f64>), PerceptualError> {
    if c.len() != chart.latent_dim() {
        return Err(PerceptualError::ShapeMismatch {
            expected: chart.latent_dim(),
            got: c.len(),
        });
    }
    if matches!(extractor.kind, ExtractorKind::None) {
        return Ok((0.0, DVector::zeros(c.len())));
    }
    let target = extractor.target.as_ref().ok_or(PerceptualError::MissingTargets)?;
    let x = chart.decode(c);
    let mut value = 0.0;
    let (f, g) = extractor.features_vjp(&x, |f| {
        let r = f - target;
        value = r.norm_squared();
        r * 2.0
    })?;
    if f.len() != target.len() {
        return Err(PerceptualError::ShapeMismatch {
            expected: target.len(),
            got: f.len(),
        });
    }
    Ok((value, chart.pullback(&g)))
}

/// Selection of `ψ` in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiKind {
    None,
    Identity,
    Linear,
    Mlp,
    ScorenetFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiSpec {
    pub kind: PsiKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub normalize_blocks: bool,
    /// Output width of the linear and mlp kinds; defaults to the ambient
    /// dimension.
    #[serde(default)]
    pub features: Option<usize>,
}

impl Default for PsiSpec {
    fn default() -> Self {
        Self {
            kind: PsiKind::ScorenetFeatures,
            seed: 0,
            normalize_blocks: false,
            features: None,
        }
    }
}

impl PsiSpec {
    /// Builds the extractor. The score-feature kind borrows the sampling
    /// network, schedule and run config.
    pub fn build(
        &self,
        ambient_dim: usize,
        net: &Arc<ScoreNetwork>,
        schedule: &NoiseSchedule,
        run: &SamplerRunConfig,
    ) -> Result<PerceptualExtractor, PerceptualError> {
        let width = self.features.unwrap_or(ambient_dim);
        if width == 0 {
            return Err(PerceptualError::Invalid("feature width must be positive".into()));
        }
        Ok(match self.kind {
            PsiKind::None => PerceptualExtractor::none(),
            PsiKind::Identity => PerceptualExtractor::identity(),
            PsiKind::Linear => {
                let mut rng = seeded(self.seed);
                let scale = 1.0 / (ambient_dim as f64).sqrt();
                let data = normal_vector(&mut rng, width * ambient_dim) * scale;
                PerceptualExtractor::linear(DMatrix::from_row_slice(width, ambient_dim, data.as_slice()))
            }
            PsiKind::Mlp => PerceptualExtractor::mlp(Mlp::random(
                &[ambient_dim, 2 * width, width],
                &[Activation::Tanh, Activation::Identity],
                self.seed,
            )?),
            PsiKind::ScorenetFeatures => PerceptualExtractor::score_features(ScoreFeatures {
                net: Arc::clone(net),
                schedule: schedule.clone(),
                run: run.clone(),
                normalize_blocks: self.normalize_blocks,
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::LinearManifold;
    use crate::schedule::build_linear_schedule;
    use crate::scoremodel::ScoreNetConfig;

    fn ae(d: usize, k: usize, seed: u64) -> LinearAutoencoder {
        let m = LinearManifold::random(d, k, seed).unwrap();
        let off = DVector::from_fn(d, |i, _| 0.1 * i as f64 - 0.2);
        LinearAutoencoder::new(m.with_offset(off).unwrap())
    }

    fn net(d: usize) -> Arc<ScoreNetwork> {
        Arc::new(
            ScoreNetwork::new(
                d,
                1000,
                &ScoreNetConfig {
                    hidden: vec![8, 8],
                    seed: 3,
                    ..ScoreNetConfig::default()
                },
            )
            .unwrap(),
        )
    }

    fn features(normalize_blocks: bool, steps: usize, eta: f64) -> ScoreFeatures {
        ScoreFeatures {
            net: net(3),
            schedule: build_linear_schedule(1000, 1e-4, 0.02).unwrap(),
            run: SamplerRunConfig {
                steps,
                eta,
                seed: 9,
                ..SamplerRunConfig::default()
            },
            normalize_blocks,
        }
    }

    fn fd_latent_grad(f: impl Fn(&DVector<f64>) -> f64, c: &DVector<f64>) -> DVector<f64> {
        let h = 1e-6;
        DVector::from_fn(c.len(), |i, _| {
            let mut p = c.clone();
            let mut m = c.clone();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    #[test]
    fn g1_identity_example() {
        let chart = IdentityChart::new(2);
        let y = DVector::from_vec(vec![0.0, 0.0]);
        let (g, grad) = g1_value_grad(&DVector::from_vec(vec![1.0, 2.0]), &y, &chart).unwrap();
        assert_eq!(g, 5.0);
        assert_eq!(grad, DVector::from_vec(vec![2.0, 4.0]));
        let (g0, grad0) = g1_value_grad(&y, &y, &chart).unwrap();
        assert_eq!((g0, grad0.norm()), (0.0, 0.0));
    }

    #[test]
    fn g1_matches_finite_differences() {
        let a = ae(6, 2, 4);
        let y = DVector::from_vec(vec![0.3, -1.0, 0.5, 2.0, 0.0, 1.0]);
        let c = DVector::from_vec(vec![0.7, -0.2]);
        let (_, grad) = g1_value_grad(&c, &y, &a).unwrap();
        let fd = fd_latent_grad(|c| g1_value_grad(c, &y, &a).unwrap().0, &c);
        assert!(rel_err(&grad, &fd) < 1e-6);
        assert!(g1_value_grad(&DVector::zeros(3), &y, &a).is_err());
    }

    #[test]
    fn none_kind_is_inert() {
        let a = ae(4, 2, 1);
        let mut ext = PerceptualExtractor::none();
        ext.precompute_targets(&DVector::from_element(4, 1.0)).unwrap();
        assert_eq!(ext.target().unwrap().len(), 0);
        let (g, grad) = g2_value_grad(&DVector::from_vec(vec![3.0, 1.0]), &ext, &a).unwrap();
        assert_eq!(g, 0.0);
        assert!(grad.iter().all(|&v| v == 0.0));
        let (g, _) = g2_value_grad(&DVector::zeros(2), &PerceptualExtractor::none(), &a).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn identity_target_and_missing_cache() {
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let ext = PerceptualExtractor::identity().targeted(&x).unwrap();
        assert_eq!(ext.target().unwrap(), &x);
        let chart = IdentityChart::new(2);
        assert_eq!(g2_value_grad(&x, &ext, &chart).unwrap(), (0.0, DVector::zeros(2)));
        let bare = PerceptualExtractor::identity();
        assert!(matches!(
            g2_value_grad(&x, &bare, &chart),
            Err(PerceptualError::MissingTargets)
        ));
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let a = ae(5, 3, 8);
        let mlp = Mlp::random(&[5, 7, 4], &[Activation::Tanh, Activation::Identity], 2).unwrap();
        let y = DVector::from_vec(vec![0.5, 0.1, -0.4, 1.2, 0.0]);
        let ext = PerceptualExtractor::mlp(mlp).targeted(&y).unwrap();
        let c = DVector::from_vec(vec![0.3, -0.8, 1.1]);
        let (_, grad) = g2_value_grad(&c, &ext, &a).unwrap();
        let fd = fd_latent_grad(|c| g2_value_grad(c, &ext, &a).unwrap().0, &c);
        assert!(rel_err(&grad, &fd) < 1e-5);
    }

    #[test]
    fn linear_closed_form_matches_tape() {
        let a = ae(5, 2, 6);
        let m = DMatrix::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
        let y = DVector::from_vec(vec![1.0, 0.0, -1.0, 0.5, 0.25]);
        let ext = PerceptualExtractor::linear(m.clone()).targeted(&y).unwrap();
        let c = DVector::from_vec(vec![0.2, -0.6]);
        let (_, grad) = g2_value_grad(&c, &ext, &a).unwrap();
        let x = a.decode(&c);
        let r = &m * &x - ext.target().unwrap();
        let closed = a.pullback(&(m.transpose() * (&r * 2.0)));
        let tape = a.pullback(&ext.vjp_on_tape(&x, &(&r * 2.0)).unwrap());
        assert!((&grad - &closed).amax() < 1e-10);
        assert!((&grad - &tape).amax() < 1e-10);
    }

    #[test]
    fn score_features_equal_unguided_taps() {
        let s = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let x = DVector::from_vec(vec![0.4, -0.3, 1.5]);
        for normalize in [false, true] {
            for eta in [0.0, 0.7] {
                let sf = features(normalize, 4, eta);
                let h = lgdm_run(
                    &x,
                    sf.net.as_ref(),
                    &IdentityChart::new(3),
                    &PerceptualExtractor::none(),
                    &s,
                    &sf.run,
                    &GuidanceConfig::unguided(),
                )
                .unwrap();
                let ext = PerceptualExtractor::score_features(sf.clone()).targeted(&x).unwrap();
                let flat: Vec<f64> = h.taps().iter().flat_map(|t| t.values.iter().copied()).collect();
                assert_eq!(ext.target().unwrap().len(), flat.len());
                if !normalize {
                    assert_eq!(ext.target().unwrap().as_slice(), flat.as_slice());
                }
                let mut tape = ComputationTape::new();
                let input = tape.leaf(to_array(&x));
                let out = score_features_on_tape(&sf, &mut tape, input).unwrap();
                assert_eq!(to_vector(tape.value(out)), *ext.target().unwrap());
            }
        }
    }

    #[test]
    fn score_features_gradient_matches_finite_differences() {
        let a = ae(3, 2, 12);
        for normalize in [false, true] {
            let sf = features(normalize, 3, 0.0);
            let y = DVector::from_vec(vec![0.2, 0.9, -0.5]);
            let ext = PerceptualExtractor::score_features(sf).targeted(&y).unwrap();
            let c = DVector::from_vec(vec![0.5, -0.4]);
            let (_, grad) = g2_value_grad(&c, &ext, &a).unwrap();
            let fd = fd_latent_grad(|c| g2_value_grad(c, &ext, &a).unwrap().0, &c);
            assert!(rel_err(&grad, &fd) < 1e-5, "{grad} vs {fd}");
        }
    }

    #[test]
    fn gradients_are_tangent() {
        let a = ae(7, 3, 2);
        let y = DVector::from_fn(7, |i, _| (i as f64).cos());
        let mlp = Mlp::random(&[7, 5, 3], &[Activation::SmoothRelu, Activation::Identity], 1).unwrap();
        let ext = PerceptualExtractor::mlp(mlp).targeted(&y).unwrap();
        let c = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let (_, g1) = g1_value_grad(&c, &y, &a).unwrap();
        let (_, g2) = g2_value_grad(&c, &ext, &a).unwrap();
        assert!(crate::manifold::tangent_residual(&a, &g1) <= 1e-10);
        assert!(crate::manifold::tangent_residual(&a, &g2) <= 1e-10);
    }

    #[test]
    fn targets_are_deterministic() {
        let x = DVector::from_vec(vec![0.4, -0.3, 1.5]);
        let a = PerceptualExtractor::score_features(features(true, 5, 0.5)).targeted(&x).unwrap();
        let b = PerceptualExtractor::score_features(features(true, 5, 0.5)).targeted(&x).unwrap();
        assert_eq!(a.target(), b.target());
    }

    #[test]
    fn psi_spec_round_trip_and_build() {
        let spec: PsiSpec =
            serde_json::from_str(r#"{"kind": "scorenet-features", "seed": 4, "normalize_blocks": true}"#).unwrap();
        assert_eq!(spec.kind, PsiKind::ScorenetFeatures);
        let s = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let n = net(3);
        let run = SamplerRunConfig::default();
        for kind in [PsiKind::None, PsiKind::Identity, PsiKind::Linear, PsiKind::Mlp, PsiKind::ScorenetFeatures] {
            let spec = PsiSpec {
                kind,
                ..PsiSpec::default()
            };
            let ext = spec.build(3, &n, &s, &run).unwrap();
            let f = ext.features(&DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
            let expected = match kind {
                PsiKind::None => 0,
                PsiKind::ScorenetFeatures => 10 * 2 * 8,
                _ => 3,
            };
            assert_eq!(f.len(), expected);
        }
    }

    use crate::rng::{normal_vector, seeded};
    use proptest::prelude::*;

    fn extractor(kind: u8, d: usize, seed: u64) -> PerceptualExtractor {
        match kind {
            0 => PerceptualExtractor::identity(),
            1 => {
                let mut rng = seeded(seed);
                let v = normal_vector(&mut rng, 3 * d);
                PerceptualExtractor::linear(DMatrix::from_row_slice(3, d, v.as_slice()))
            }
            2 => PerceptualExtractor::mlp(
                Mlp::random(&[d, 6, 4], &[Activation::SmoothRelu, Activation::Tanh], seed).unwrap(),
            ),
            _ => PerceptualExtractor::score_features(ScoreFeatures {
                net: net(d),
                schedule: build_linear_schedule(1000, 1e-4, 0.02).unwrap(),
                run: SamplerRunConfig {
                    steps: 2,
                    seed,
                    ..SamplerRunConfig::default()
                },
                normalize_blocks: seed.is_multiple_of(2),
            }),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn guidance_gradients_match_central_differences(
            d in 3usize..7,
            k_frac in 0.0f64..1.0,
            seed in 0u64..10_000,
            kind in 0u8..4,
        ) {
            let k = 1 + ((d - 2) as f64 * k_frac) as usize;
            let a = ae(d, k, seed);
            let mut rng = seeded(seed ^ 0x5eed);
            let y = normal_vector(&mut rng, d);
            let c = normal_vector(&mut rng, k);
            let (_, g1) = g1_value_grad(&c, &y, &a).unwrap();
            let fd1 = fd_latent_grad(|c| g1_value_grad(c, &y, &a).unwrap().0, &c);
            prop_assert!(rel_err(&g1, &fd1) < 1e-5, "G1: {g1} vs {fd1}");
            let ext = extractor(kind, d, seed).targeted(&y).unwrap();
            let (value, g2) = g2_value_grad(&c, &ext, &a).unwrap();
            let fd2 = fd_latent_grad(|c| g2_value_grad(c, &ext, &a).unwrap().0, &c);
            prop_assert!(value > 0.0);
            prop_assert!(rel_err(&g2, &fd2) < 1e-5, "G2 kind {kind}: {g2} vs {fd2}");
        }
    }
}
