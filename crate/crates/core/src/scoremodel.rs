//! Noise-prediction network `ε̂ = s_θ(x_t, t)` with sinusoidal time
//! embedding and hidden-layer taps, trained by denoising score matching.
//!
//! The ε-form is canonical. The score form is reached only through
//! [`score_from_noise`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::{
    adam_step, read_checkpoint, write_checkpoint, Activation, AdamConfig, AdamState,
    ComputationTape, DenseArray, EngineError, LayerVars, Mlp, Var,
};
use crate::rng::{normal, seeded};
use crate::schedule::{NoiseSchedule, ScheduleConfig, ScheduleError};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("state has dimension {got}, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("timestep {t} outside 1..={max}")]
    InvalidTimestep { t: usize, max: usize },
    #[error("state contains non-finite values")]
    NonFiniteState,
    #[error("tap layer {layer} is not a hidden layer (network has {hidden} hidden layers)")]
    InvalidTap { layer: usize, hidden: usize },
    #[error("score undefined where alpha_bar = 1 (t = {0})")]
    ZeroNoise(usize),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Four log-spaced angular frequencies applied to `t/T`.
pub fn default_frequencies() -> Vec<f64> {
    (0..4)
        .map(|i| std::f64::consts::PI * 10f64.powf(0.5 * i as f64))
        .collect()
}

/// `[sin(f₁ t/T), …, sin(f_m t/T), cos(f₁ t/T), …, cos(f_m t/T)]`.
pub fn time_embedding(frequencies: &[f64], t: usize, step_count: usize) -> Vec<f64> {
    let u = t as f64 / step_count as f64;
    let sines = frequencies.iter().map(|f| (f * u).sin());
    let cosines = frequencies.iter().map(|f| (f * u).cos());
    sines.chain(cosines).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub frequencies: Vec<f64>,
    pub seed: u64,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::SmoothRelu,
            frequencies: default_frequencies(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    trunk: Mlp,
    frequencies: Vec<f64>,
    tap_layers: BTreeSet<usize>,
    state_dim: usize,
    step_count: usize,
}

/// Noise estimate plus the requested hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub eps: DVector<f64>,
    pub taps: BTreeMap<usize, DVector<f64>>,
}

/// Tape handles of one network application.
#[derive(Debug, Clone)]
pub struct ScoreVars {
    pub eps: Var,
    pub taps: BTreeMap<usize, Var>,
}

impl ScoreNetwork {
    /// Fresh network; taps default to every hidden layer.
    pub fn new(state_dim: usize, step_count: usize, cfg: &ScoreNetConfig) -> Result<Self, ScoreError> {
        let mut dims = vec![state_dim + 2 * cfg.frequencies.len()];
        dims.extend(&cfg.hidden);
        dims.push(state_dim);
        let mut acts = vec![cfg.activation; cfg.hidden.len()];
        acts.push(Activation::Identity);
        let trunk = Mlp::random(&dims, &acts, cfg.seed)?;
        let taps = (0..cfg.hidden.len()).collect();
        Self::from_trunk(trunk, cfg.frequencies.clone(), taps, step_count)
    }

    pub fn from_trunk(
        trunk: Mlp,
        frequencies: Vec<f64>,
        tap_layers: BTreeSet<usize>,
        step_count: usize,
    ) -> Result<Self, ScoreError> {
        let emb = 2 * frequencies.len();
        if trunk.input_dim() <= emb {
            return Err(ScoreError::DimensionMismatch {
                expected: emb + 1,
                got: trunk.input_dim(),
            });
        }
        let state_dim = trunk.input_dim() - emb;
        if trunk.output_dim() != state_dim {
            return Err(ScoreError::DimensionMismatch {
                expected: state_dim,
                got: trunk.output_dim(),
            });
        }
        let hidden = trunk.layers().len() - 1;
        if let Some(&layer) = tap_layers.iter().find(|&&l| l >= hidden) {
            return Err(ScoreError::InvalidTap { layer, hidden });
        }
        Ok(Self {
            trunk,
            frequencies,
            tap_layers,
            state_dim,
            step_count,
        })
    }

    pub fn with_taps(mut self, tap_layers: BTreeSet<usize>) -> Result<Self, ScoreError> {
        let hidden = self.hidden_layer_count();
        if let Some(&layer) = tap_layers.iter().find(|&&l| l >= hidden) {
            return Err(ScoreError::InvalidTap { layer, hidden });
        }
        self.tap_layers = tap_layers;
        Ok(self)
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut Mlp {
        &mut self.trunk
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn tap_layers(&self) -> &BTreeSet<usize> {
        &self.tap_layers
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn hidden_layer_count(&self) -> usize {
        self.trunk.layers().len() - 1
    }

    fn check(&self, x: &DVector<f64>, t: usize) -> Result<(), ScoreError> {
        if x.len() != self.state_dim {
            return Err(ScoreError::DimensionMismatch {
                expected: self.state_dim,
                got: x.len(),
            });
        }
        if t == 0 || t > self.step_count {
            return Err(ScoreError::InvalidTimestep {
                t,
                max: self.step_count,
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ScoreError::NonFiniteState);
        }
        Ok(())
    }

    fn input_row(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut row = x.to_vec();
        row.extend(time_embedding(&self.frequencies, t, self.step_count));
        row
    }

    /// `ε̂` and the tap activations at `(x_t, t)`.
    pub fn predict_noise(&self, x_t: &DVector<f64>, t: usize) -> Result<NoisePrediction, ScoreError> {
        self.check(x_t, t)?;
        let input = DenseArray::vector(self.input_row(x_t.as_slice(), t));
        let out = self.trunk.forward(&input, false)?;
        let taps = self
            .tap_layers
            .iter()
            .map(|&l| (l, DVector::from_column_slice(out.activations[l].data())))
            .collect();
        Ok(NoisePrediction {
            eps: DVector::from_column_slice(out.output.data()),
            taps,
        })
    }

    /// Registers the trunk parameters on `tape`.
    pub fn register(&self, tape: &mut ComputationTape) -> Vec<LayerVars> {
        self.trunk.register(tape)
    }

    /// Records one application on `tape` with the state given as a `[D]` node.
    pub fn apply_on_tape(
        &self,
        tape: &mut ComputationTape,
        params: &[LayerVars],
        x: Var,
        t: usize,
    ) -> Result<ScoreVars, ScoreError> {
        if t == 0 || t > self.step_count {
            return Err(ScoreError::InvalidTimestep {
                t,
                max: self.step_count,
            });
        }
        let emb = tape.leaf(DenseArray::vector(time_embedding(
            &self.frequencies,
            t,
            self.step_count,
        )));
        let input = tape.concat(&[x, emb])?;
        let vars = self.trunk.apply_on_tape(tape, params, input)?;
        let taps = self
            .tap_layers
            .iter()
            .map(|&l| (l, vars.activations[l]))
            .collect();
        Ok(ScoreVars {
            eps: vars.output,
            taps,
        })
    }

    /// Writes the `PMGL` trunk checkpoint and its JSON sidecar.
    pub fn save(
        &self,
        checkpoint: &Path,
        sidecar: &Path,
        schedule: ScheduleConfig,
        seed: u64,
    ) -> Result<(), ScoreError> {
        write_checkpoint(&self.trunk, BufWriter::new(File::create(checkpoint)?))?;
        let meta = ScoreSidecar {
            state_dim: self.state_dim,
            frequencies: self.frequencies.clone(),
            tap_layers: self.tap_layers.iter().copied().collect(),
            schedule,
            seed,
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| ScoreError::Sidecar(e.to_string()))?;
        std::fs::write(sidecar, text)?;
        Ok(())
    }

    pub fn load(checkpoint: &Path, sidecar: &Path) -> Result<(Self, ScoreSidecar), ScoreError> {
        let trunk = read_checkpoint(BufReader::new(File::open(checkpoint)?))?;
        let text = std::fs::read_to_string(sidecar)?;
        let meta: ScoreSidecar =
            serde_json::from_str(&text).map_err(|e| ScoreError::Sidecar(e.to_string()))?;
        let net = Self::from_trunk(
            trunk,
            meta.frequencies.clone(),
            meta.tap_layers.iter().copied().collect(),
            meta.schedule.steps,
        )?;
        if net.state_dim != meta.state_dim {
            return Err(ScoreError::Sidecar(format!(
                "sidecar state_dim {} disagrees with checkpoint {}",
                meta.state_dim, net.state_dim
            )));
        }
        Ok((net, meta))
    }
}

/// JSON metadata stored next to a score-network checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSidecar {
    pub state_dim: usize,
    pub frequencies: Vec<f64>,
    pub tap_layers: Vec<usize>,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

/// `−ε̂ / √(1 − ᾱ_t)`.
pub fn score_from_noise(
    eps_hat: &DVector<f64>,
    s: &NoiseSchedule,
    t: usize,
) -> Result<DVector<f64>, ScoreError> {
    let a = s.alpha_bar(t)?;
    if a >= 1.0 {
        return Err(ScoreError::ZeroNoise(t));
    }
    Ok(eps_hat * (-1.0 / (1.0 - a).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Timesteps are drawn uniformly from `t_min..=t_max`.
    pub t_min: usize,
    pub t_max: usize,
    pub seed: u64,
}

impl DsmConfig {
    pub fn full_range(step_count: usize) -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            learning_rate: 2e-3,
            t_min: 1,
            t_max: step_count,
            seed: 0,
        }
    }

    fn validate(&self, step_count: usize) -> Result<(), ScoreError> {
        if self.batch_size == 0 {
            return Err(ScoreError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ScoreError::InvalidConfig("learning rate must be positive".into()));
        }
        if self.t_min == 0 || self.t_min > self.t_max || self.t_max > step_count {
            return Err(ScoreError::InvalidConfig(format!(
                "timestep range {}..={} outside 1..={step_count}",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }
}

const DIVERGENCE_LOSS: f64 = 1e6;

/// Builds one `[n, D + 2m]` batch of noised inputs with their noise targets.
fn draw_batch<R: Rng>(
    net: &ScoreNetwork,
    batch: &[&DVector<f64>],
    s: &NoiseSchedule,
    t_min: usize,
    t_max: usize,
    rng: &mut R,
) -> Result<(DenseArray, DenseArray), ScoreError> {
    let d = net.state_dim;
    let mut inputs = Vec::with_capacity(batch.len() * (d + 2 * net.frequencies.len()));
    let mut targets = Vec::with_capacity(batch.len() * d);
    for x0 in batch {
        let t = rng.random_range(t_min..=t_max);
        let a = s.alpha_bar(t)?;
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let eps: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let xt: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| sa * x + sn * e).collect();
        inputs.extend(net.input_row(&xt, t));
        targets.extend(eps);
    }
    let n = batch.len();
    Ok((
        DenseArray::matrix(n, inputs.len() / n, inputs)?,
        DenseArray::matrix(n, d, targets)?,
    ))
}

/// Mean over the batch of `‖ε̂ − ε‖²` with gradients for every trunk parameter.
fn batch_loss_grad(
    net: &ScoreNetwork,
    inputs: &DenseArray,
    targets: &DenseArray,
) -> Result<(f64, Vec<DenseArray>), ScoreError> {
    let fwd = net.trunk.forward(inputs, true)?;
    let mut rec = fwd.tape.expect("recorded");
    let target = rec.tape.leaf(targets.clone());
    let diff = rec.tape.sub(rec.vars.output, target)?;
    let sq = rec.tape.sum_squares(diff);
    let loss = rec.tape.scale(sq, 1.0 / inputs.rows() as f64);
    rec.tape.set_output(loss);
    let grads = rec.tape.backward(&DenseArray::scalar(1.0))?;
    let value = rec.tape.value(loss).data()[0];
    let mut out = Vec::with_capacity(rec.params.len() * 2);
    for (p, layer) in rec.params.iter().zip(net.trunk.layers()) {
        out.push(grads.get_or_zeros(p.weight, &layer.weight));
        out.push(grads.get_or_zeros(p.bias, &layer.bias));
    }
    Ok((value, out))
}

/// Denoising score matching in noise-prediction form. Returns the trained
/// network and the mean training loss of every epoch.
pub fn train_dsm(
    net: &ScoreNetwork,
    dataset: &[DVector<f64>],
    s: &NoiseSchedule,
    cfg: &DsmConfig,
) -> Result<(ScoreNetwork, Vec<f64>), ScoreError> {
    if dataset.is_empty() {
        return Err(ScoreError::EmptyDataset);
    }
    if let Some(x) = dataset.iter().find(|x| x.len() != net.state_dim) {
        return Err(ScoreError::DimensionMismatch {
            expected: net.state_dim,
            got: x.len(),
        });
    }
    cfg.validate(s.step_count())?;
    let mut trained = net.clone();
    let mut curve = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok((trained, curve));
    }
    let mut rng = seeded(cfg.seed);
    let mut state = AdamState::new(trained.trunk.parameters());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as f64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DVector<f64>> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (inputs, targets) = draw_batch(&trained, &batch, s, cfg.t_min, cfg.t_max, &mut rng)?;
            let (loss, grads) = batch_loss_grad(&trained, &inputs, &targets)?;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(ScoreError::Diverged { epoch, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            // cosine decay to 5% of the base rate
            let progress = state.step as f64 / total_steps;
            let lr = cfg.learning_rate
                * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            let adam = AdamConfig {
                lr,
                ..AdamConfig::default()
            };
            let mut params = trained.trunk.parameters_mut();
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }
        curve.push(epoch_loss / dataset.len() as f64);
    }
    Ok((trained, curve))
}

/// Monte-Carlo DSM loss `E‖ε̂(x_t, t) − ε‖²` at a fixed timestep.
pub fn dsm_loss_at(
    net: &ScoreNetwork,
    dataset: &[DVector<f64>],
    s: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<f64, ScoreError> {
    let mut rng = seeded(seed);
    let refs: Vec<&DVector<f64>> = dataset.iter().collect();
    let (inputs, targets) = draw_batch(net, &refs, s, t, t, &mut rng)?;
    let out = net.trunk.forward(&inputs, false)?;
    Ok(out
        .output
        .data()
        .iter()
        .zip(targets.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / dataset.len() as f64)
}
