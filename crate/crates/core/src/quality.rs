//! Hyperfeature pooling, the quality regression head and rank/linear
//! correlation metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::{
    adam_step, read_checkpoint, write_checkpoint, Activation, AdamConfig, AdamState, DenseArray, EngineError, Layer,
    Mlp,
};
use crate::sampler::TapRecord;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("no taps to aggregate")]
    EmptyTaps,
    #[error("layer {layer} has dimension {got} at t = {t}, expected {expected}")]
    RaggedLayer {
        layer: usize,
        t: usize,
        expected: usize,
        got: usize,
    },
    #[error("duplicate tap for (t = {t}, layer = {layer})")]
    DuplicateTap { t: usize, layer: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("scores have fewer than two distinct values")]
    ConstantScores,
    #[error("ridge lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("non-finite value in features or scores")]
    NonFinite,
    #[error("linear system could not be factorized")]
    Singular,
    #[error("head training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("head sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Every `(t, layer)` block in order.
    #[default]
    Concat,
    /// Per layer, the average over timesteps.
    MeanOverTime,
    /// One scalar per `(t, layer)` block: the mean of its entries.
    PerLayerMean,
}

/// Activations keyed by `(t, layer)`, iterated with `t` descending and
/// `layer` ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperfeatures {
    entries: BTreeMap<(std::cmp::Reverse<usize>, usize), DVector<f64>>,
    pooling: Pooling,
    pooled: DVector<f64>,
}

impl Hyperfeatures {
    pub fn pooled(&self) -> &DVector<f64> {
        &self.pooled
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, t: usize, layer: usize) -> Option<&DVector<f64>> {
        self.entries.get(&(std::cmp::Reverse(t), layer))
    }

    /// `(t, layer)` keys in pooling order.
    pub fn keys(&self) -> Vec<(usize, usize)> {
        self.entries.keys().map(|(t, l)| (t.0, *l)).collect()
    }

    pub fn timesteps(&self) -> BTreeSet<usize> {
        self.entries.keys().map(|(t, _)| t.0).collect()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.entries.keys().map(|(_, l)| *l).collect()
    }

    fn records(&self) -> Vec<TapRecord> {
        self.entries
            .iter()
            .map(|((t, l), v)| TapRecord {
                t: t.0,
                layer: *l,
                values: v.clone(),
            })
            .collect()
    }

    /// Re-pools keeping only the listed layers.
    pub fn restrict_layers(&self, layers: &BTreeSet<usize>) -> Result<Self, QualityError> {
        let kept: Vec<TapRecord> = self.records().into_iter().filter(|r| layers.contains(&r.layer)).collect();
        aggregate(&kept, self.pooling)
    }

    /// Re-pools keeping only the listed timesteps.
    pub fn restrict_timesteps(&self, ts: &BTreeSet<usize>) -> Result<Self, QualityError> {
        let kept: Vec<TapRecord> = self.records().into_iter().filter(|r| ts.contains(&r.t)).collect();
        aggregate(&kept, self.pooling)
    }

    /// Same layout, with every layer outside `layers` set to zero.
    pub fn mask_layers(&self, layers: &BTreeSet<usize>) -> Result<Self, QualityError> {
        let masked: Vec<TapRecord> = self
            .records()
            .into_iter()
            .map(|mut r| {
                if !layers.contains(&r.layer) {
                    r.values.fill(0.0);
                }
                r
            })
            .collect();
        aggregate(&masked, self.pooling)
    }
}

/// Collects taps into [`Hyperfeatures`] and pools them.
pub fn aggregate(taps: &[TapRecord], pooling: Pooling) -> Result<Hyperfeatures, QualityError> {
    if taps.is_empty() {
        return Err(QualityError::EmptyTaps);
    }
    let mut entries = BTreeMap::new();
    let mut dims: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for tap in taps {
        let (expected, _) = *dims.entry(tap.layer).or_insert((tap.values.len(), tap.t));
        if tap.values.len() != expected {
            return Err(QualityError::RaggedLayer {
                layer: tap.layer,
                t: tap.t,
                expected,
                got: tap.values.len(),
            });
        }
        if entries
            .insert((std::cmp::Reverse(tap.t), tap.layer), tap.values.clone())
            .is_some()
        {
            return Err(QualityError::DuplicateTap {
                t: tap.t,
                layer: tap.layer,
            });
        }
    }
    let pooled = match pooling {
        Pooling::Concat => {
            let flat: Vec<f64> = entries.values().flat_map(|v| v.iter().copied()).collect();
            DVector::from_vec(flat)
        }
        Pooling::MeanOverTime => {
            let mut flat = Vec::new();
            for (&layer, &(dim, _)) in &dims {
                let mut acc = DVector::zeros(dim);
                let mut count = 0usize;
                for ((_, l), v) in &entries {
                    if *l == layer {
                        acc += v;
                        count += 1;
                    }
                }
                flat.extend((acc / count as f64).iter());
            }
            DVector::from_vec(flat)
        }
        Pooling::PerLayerMean => DVector::from_iterator(
            entries.len(),
            entries.values().map(|v| if v.is_empty() { 0.0 } else { v.mean() }),
        ),
    };
    Ok(Hyperfeatures {
        entries,
        pooling,
        pooled,
    })
}

/// Head family and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HeadSpec {
    Ridge {
        lambda: f64,
    },
    #[serde(rename = "mlp-2-hidden")]
    Mlp {
        hidden: [usize; 2],
        epochs: usize,
        learning_rate: f64,
        seed: u64,
    },
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec::Ridge { lambda: 1e-3 }
    }
}

impl HeadSpec {
    pub fn wide_mlp(seed: u64) -> Self {
        HeadSpec::Mlp {
            hidden: [64, 32],
            epochs: 500,
            learning_rate: 3e-3,
            seed,
        }
    }
}

pub const RIDGE_LAMBDA_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
enum HeadModel {
    /// Weights on normalized features plus bias.
    Linear { weights: DVector<f64>, bias: f64 },
    /// Network on normalized features; output rescaled by `y_std`, `y_mean`.
    Mlp { net: Mlp, y_mean: f64, y_std: f64 },
}

/// Fitted regressor from pooled hyperfeatures to a quality score. Input
/// normalization statistics are frozen at fit time; features whose training
/// spread is zero get weight zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionHead {
    spec: HeadSpec,
    mu: DVector<f64>,
    sigma: DVector<f64>,
    model: HeadModel,
}

fn check_training(x: &DMatrix<f64>, y: &[f64]) -> Result<(), QualityError> {
    if x.nrows() != y.len() {
        return Err(QualityError::ShapeMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if y.len() < 2 {
        return Err(QualityError::TooFewSamples {
            needed: 2,
            got: y.len(),
        });
    }
    if !(x.iter().all(|v| v.is_finite()) && y.iter().all(|v| v.is_finite())) {
        return Err(QualityError::NonFinite);
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(QualityError::ConstantScores);
    }
    Ok(())
}

fn column_stats(x: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = x.nrows() as f64;
    let mu = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n);
    let sigma = DVector::from_fn(x.ncols(), |j, _| {
        let m = mu[j];
        let var = x.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd > MIN_STD * (1.0 + m.abs()) {
            sd
        } else {
            0.0
        }
    });
    (mu, sigma)
}

fn normalize_row(x: &[f64], mu: &DVector<f64>, sigma: &DVector<f64>, out: &mut [f64]) {
    for j in 0..x.len() {
        out[j] = if sigma[j] > 0.0 { (x[j] - mu[j]) / sigma[j] } else { 0.0 };
    }
}

fn normalize_matrix(x: &DMatrix<f64>, mu: &DVector<f64>, sigma: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        if sigma[j] > 0.0 {
            (x[(i, j)] - mu[j]) / sigma[j]
        } else {
            0.0
        }
    })
}

/// Solves `min (1/n)‖Z w − (y − ȳ)‖² + λ‖w‖²` in primal or dual form,
/// whichever system is smaller.
fn ridge_solve(z: &DMatrix<f64>, yc: &DVector<f64>, lambda: f64) -> Result<DVector<f64>, QualityError> {
    let (n, p) = z.shape();
    let nl = n as f64 * lambda;
    if p <= n {
        let mut a = z.transpose() * z;
        for i in 0..p {
            a[(i, i)] += nl;
        }
        let rhs = z.transpose() * yc;
        let chol = a.cholesky().ok_or(QualityError::Singular)?;
        Ok(chol.solve(&rhs))
    } else {
        let mut k = z * z.transpose();
        for i in 0..n {
            k[(i, i)] += nl;
        }
        let chol = k.cholesky().ok_or(QualityError::Singular)?;
        Ok(z.transpose() * chol.solve(yc))
    }
}

fn fit_mlp(
    z: &DMatrix<f64>,
    y: &[f64],
    hidden: [usize; 2],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<HeadModel, QualityError> {
    let n = y.len();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let y_std = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let target = DenseArray::matrix(n, 1, y.iter().map(|v| (v - y_mean) / y_std).collect())?;
    let inputs = DenseArray::matrix(n, z.ncols(), z.transpose().as_slice().to_vec())?;
    let mut net = Mlp::random(
        &[z.ncols(), hidden[0], hidden[1], 1],
        &[Activation::Tanh, Activation::Tanh, Activation::Identity],
        seed,
    )?;
    let mut state = AdamState::new(net.parameters());
    let adam = AdamConfig {
        lr: learning_rate,
        ..AdamConfig::default()
    };
    for epoch in 0..epochs {
        let fwd = net.forward(&inputs, true)?;
        let mut rec = fwd.tape.expect("recorded");
        let t = rec.tape.leaf(target.clone());
        let diff = rec.tape.sub(rec.vars.output, t)?;
        let sq = rec.tape.sum_squares(diff);
        let loss = rec.tape.scale(sq, 1.0 / n as f64);
        rec.tape.set_output(loss);
        if !rec.tape.value(loss).data()[0].is_finite() {
            return Err(QualityError::Diverged { epoch });
        }
        let grads = rec.tape.backward(&DenseArray::scalar(1.0))?;
        let flat: Vec<DenseArray> = rec
            .params
            .iter()
            .zip(net.layers())
            .flat_map(|(p, l)| [grads.get_or_zeros(p.weight, &l.weight), grads.get_or_zeros(p.bias, &l.bias)])
            .collect();
        adam_step(&mut net.parameters_mut(), &flat, &mut state, &adam)
            .map_err(|_| QualityError::Diverged { epoch })?;
    }
    Ok(HeadModel::Mlp { net, y_mean, y_std })
}

/// Fits a head on rows of `x` (one item per row) against `y`.
pub fn fit_head(x: &DMatrix<f64>, y: &[f64], spec: &HeadSpec) -> Result<RegressionHead, QualityError> {
    check_training(x, y)?;
    let (mu, sigma) = column_stats(x);
    let z = normalize_matrix(x, &mu, &sigma);
    let model = match *spec {
        HeadSpec::Ridge { lambda } => {
            if !(lambda.is_finite() && lambda > 0.0) {
                return Err(QualityError::InvalidLambda(lambda));
            }
            let y_mean = y.iter().sum::<f64>() / y.len() as f64;
            let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
            HeadModel::Linear {
                weights: ridge_solve(&z, &yc, lambda)?,
                bias: y_mean,
            }
        }
        HeadSpec::Mlp {
            hidden,
            epochs,
            learning_rate,
            seed,
        } => fit_mlp(&z, y, hidden, epochs, learning_rate, seed)?,
    };
    Ok(RegressionHead {
        spec: spec.clone(),
        mu,
        sigma,
        model,
    })
}

/// Ridge head with `λ` chosen on the validation rows by SRCC, ties broken
/// by PLCC and then by the smaller `λ`.
pub fn select_ridge(
    x_train: &DMatrix<f64>,
    y_train: &[f64],
    x_val: &DMatrix<f64>,
    y_val: &[f64],
    grid: &[f64],
) -> Result<(RegressionHead, f64), QualityError> {
    let mut best: Option<(RegressionHead, f64, (f64, f64))> = None;
    for &lambda in grid {
        let head = fit_head(x_train, y_train, &HeadSpec::Ridge { lambda })?;
        let pred = head.predict_rows(x_val)?;
        let score = match CorrelationReport::compute(&pred, y_val) {
            Ok(r) => (r.srcc, r.plcc),
            Err(_) => (f64::NEG_INFINITY, f64::NEG_INFINITY),
        };
        if best.as_ref().is_none_or(|(_, _, s)| score > *s) {
            best = Some((head, lambda, score));
        }
    }
    let (head, lambda, _) = best.ok_or(QualityError::TooFewSamples { needed: 1, got: 0 })?;
    Ok((head, lambda))
}

impl RegressionHead {
    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.mu.len()
    }

    pub fn norm_mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// Training standard deviations; `0` marks a dropped column.
    pub fn norm_sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    /// Weights and bias on normalized features, ridge heads only.
    pub fn linear_parts(&self) -> Option<(&DVector<f64>, f64)> {
        match &self.model {
            HeadModel::Linear { weights, bias } => Some((weights, *bias)),
            HeadModel::Mlp { .. } => None,
        }
    }

    /// Ridge weights and bias in raw feature units: `q = w·x + b`.
    pub fn raw_linear(&self) -> Option<(DVector<f64>, f64)> {
        let (w, b) = self.linear_parts()?;
        let raw = DVector::from_fn(w.len(), |j, _| if self.sigma[j] > 0.0 { w[j] / self.sigma[j] } else { 0.0 });
        let shift: f64 = raw.iter().zip(self.mu.iter()).map(|(a, m)| a * m).sum();
        Some((raw, b - shift))
    }

    pub fn predict(&self, x: &DVector<f64>) -> Result<f64, QualityError> {
        if x.len() != self.input_dim() {
            return Err(QualityError::ShapeMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut z = vec![0.0; x.len()];
        normalize_row(x.as_slice(), &self.mu, &self.sigma, &mut z);
        match &self.model {
            HeadModel::Linear { weights, bias } => {
                Ok(bias + z.iter().zip(weights.iter()).map(|(a, b)| a * b).sum::<f64>())
            }
            HeadModel::Mlp { net, y_mean, y_std } => {
                let out = net.forward(&DenseArray::vector(z), false)?;
                Ok(y_mean + y_std * out.output.data()[0])
            }
        }
    }

    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Result<Vec<f64>, QualityError> {
        (0..x.nrows())
            .map(|i| self.predict(&x.row(i).transpose()))
            .collect()
    }

    /// Writes the `PMGL` parameter file and a JSON sidecar with the kind,
    /// `λ` and normalization statistics.
    pub fn save(&self, checkpoint: &Path, sidecar: &Path) -> Result<(), QualityError> {
        let (net, y_mean, y_std) = match &self.model {
            HeadModel::Linear { weights, bias } => (
                Mlp::from_layers(vec![Layer {
                    weight: DenseArray::matrix(1, weights.len(), weights.as_slice().to_vec())?,
                    bias: DenseArray::vector(vec![*bias]),
                    activation: Activation::Identity,
                }])?,
                None,
                None,
            ),
            HeadModel::Mlp { net, y_mean, y_std } => (net.clone(), Some(*y_mean), Some(*y_std)),
        };
        write_checkpoint(&net, BufWriter::new(File::create(checkpoint)?))?;
        let meta = HeadSidecar {
            spec: self.spec.clone(),
            lambda: match self.spec {
                HeadSpec::Ridge { lambda } => Some(lambda),
                HeadSpec::Mlp { .. } => None,
            },
            norm_mu: self.mu.as_slice().to_vec(),
            norm_sigma: self.sigma.as_slice().to_vec(),
            y_mean,
            y_std,
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| QualityError::Sidecar(e.to_string()))?;
        std::fs::write(sidecar, text)?;
        Ok(())
    }

    pub fn load(checkpoint: &Path, sidecar: &Path) -> Result<Self, QualityError> {
        let net = read_checkpoint(BufReader::new(File::open(checkpoint)?))?;
        let meta: HeadSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar)?)
            .map_err(|e| QualityError::Sidecar(e.to_string()))?;
        if meta.norm_mu.len() != meta.norm_sigma.len() || net.input_dim() != meta.norm_mu.len() {
            return Err(QualityError::Sidecar("normalization length disagrees with checkpoint".into()));
        }
        let model = match meta.spec {
            HeadSpec::Ridge { .. } => {
                let layer = &net.layers()[0];
                HeadModel::Linear {
                    weights: DVector::from_column_slice(layer.weight.data()),
                    bias: layer.bias.data()[0],
                }
            }
            HeadSpec::Mlp { .. } => HeadModel::Mlp {
                net,
                y_mean: meta.y_mean.ok_or_else(|| QualityError::Sidecar("missing y_mean".into()))?,
                y_std: meta.y_std.ok_or_else(|| QualityError::Sidecar("missing y_std".into()))?,
            },
        };
        Ok(Self {
            spec: meta.spec,
            mu: DVector::from_vec(meta.norm_mu),
            sigma: DVector::from_vec(meta.norm_sigma),
            model,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSidecar {
    #[serde(flatten)]
    pub spec: HeadSpec,
    #[serde(rename = "lambda_selected")]
    pub lambda: Option<f64>,
    pub norm_mu: Vec<f64>,
    pub norm_sigma: Vec<f64>,
    #[serde(default)]
    pub y_mean: Option<f64>,
    #[serde(default)]
    pub y_std: Option<f64>,
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<(), QualityError> {
    if xs.len() != ys.len() {
        return Err(QualityError::ShapeMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(QualityError::TooFewSamples {
            needed: 3,
            got: xs.len(),
        });
    }
    if !xs.iter().chain(ys).all(|v| v.is_finite()) {
        return Err(QualityError::NonFinite);
    }
    Ok(())
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, QualityError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(QualityError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they occupy.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation. Errors on fewer than three points or a constant
/// input.
pub fn plcc(xs: &[f64], ys: &[f64]) -> Result<f64, QualityError> {
    check_pair(xs, ys)?;
    pearson(xs, ys)
}

/// Spearman correlation: Pearson on average ranks.
pub fn srcc(xs: &[f64], ys: &[f64]) -> Result<f64, QualityError> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub plcc: f64,
    pub srcc: f64,
    pub n: usize,
}

impl CorrelationReport {
    pub fn compute(predicted: &[f64], truth: &[f64]) -> Result<Self, QualityError> {
        Ok(Self {
            plcc: plcc(predicted, truth)?,
            srcc: srcc(predicted, truth)?,
            n: predicted.len(),
        })
    }
}

/// Median of finite values; the mean of the two middle values for even
/// counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}
