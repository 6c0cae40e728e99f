use serde::{Deserialize, Serialize};

use super::array::{affine_kernel, DenseArray};
use super::tape::{ComputationTape, Var};
use super::EngineError;
use crate::rng::{normal, seeded};

/// Pointwise nonlinearities. All are smooth so finite differences stay clean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    /// Softplus, `ln(1 + eˣ)`.
    SmoothRelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::SmoothRelu => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// Derivative with respect to the pre-activation input.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::SmoothRelu => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::SmoothRelu => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::SmoothRelu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: DenseArray,
    /// `[out]`.
    pub bias: DenseArray,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Stack of affine layers, each followed by its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// Handles produced when an [`Mlp`] is applied on a tape.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub output: Var,
    /// Post-activation output of every layer, last one included.
    pub activations: Vec<Var>,
}

#[derive(Debug)]
pub struct RecordedMlp {
    pub tape: ComputationTape,
    pub input: Var,
    pub params: Vec<LayerVars>,
    pub vars: MlpVars,
}

#[derive(Debug)]
pub struct MlpForward {
    pub output: DenseArray,
    pub activations: Vec<DenseArray>,
    pub tape: Option<RecordedMlp>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, EngineError> {
        if layers.is_empty() {
            return Err(EngineError::EmptyNetwork);
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.shape().len() != 2 || layer.bias.shape() != [layer.output_dim()] {
                return Err(EngineError::ShapeMismatch {
                    op: "layer",
                    expected: vec![layer.output_dim()],
                    got: layer.bias.shape().to_vec(),
                });
            }
            if !(layer.weight.all_finite() && layer.bias.all_finite()) {
                return Err(EngineError::NonFiniteParameters { layer: i });
            }
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(EngineError::ShapeMismatch {
                    op: "layer chain",
                    expected: vec![pair[0].output_dim()],
                    got: vec![pair[1].input_dim()],
                });
            }
        }
        Ok(Self { layers })
    }

    /// Gaussian init with variance `1/fan_in`, zero biases.
    /// `dims = [in, h1, ..., out]`, one activation per layer.
    pub fn random(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self, EngineError> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(EngineError::EmptyNetwork);
        }
        let mut rng = seeded(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let (inp, out) = (d[0], d[1]);
                let scale = 1.0 / (inp as f64).sqrt();
                let data: Vec<f64> = (0..inp * out)
                    .map(|_| scale * normal(&mut rng))
                    .collect();
                Layer {
                    weight: DenseArray::matrix(out, inp, data).expect("dims"),
                    bias: DenseArray::zeros(&[out]),
                    activation,
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Flat parameter list `[w0, b0, w1, b1, ...]`.
    pub fn parameters(&self) -> Vec<&DenseArray> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DenseArray> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn check_input(&self, x: &DenseArray) -> Result<(), EngineError> {
        if x.cols() != self.input_dim() {
            return Err(EngineError::ShapeMismatch {
                op: "mlp input",
                expected: vec![self.input_dim()],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &DenseArray, record: bool) -> Result<MlpForward, EngineError> {
        self.check_input(x)?;
        if record {
            let mut tape = ComputationTape::new();
            let input = tape.leaf(x.clone());
            let params = self.register(&mut tape);
            let vars = self.apply_on_tape(&mut tape, &params, input)?;
            tape.set_output(vars.output);
            let activations = vars
                .activations
                .iter()
                .map(|v| tape.value(*v).clone())
                .collect();
            let output = tape.value(vars.output).clone();
            return Ok(MlpForward {
                output,
                activations,
                tape: Some(RecordedMlp {
                    tape,
                    input,
                    params,
                    vars,
                }),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let pre = affine_kernel(&h, &layer.weight, &layer.bias);
            h = pre.map(|v| layer.activation.apply(v));
            activations.push(h.clone());
        }
        Ok(MlpForward {
            output: h,
            activations,
            tape: None,
        })
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn register(&self, tape: &mut ComputationTape) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.leaf(l.weight.clone()),
                bias: tape.leaf(l.bias.clone()),
            })
            .collect()
    }

    pub fn apply_on_tape(
        &self,
        tape: &mut ComputationTape,
        params: &[LayerVars],
        x: Var,
    ) -> Result<MlpVars, EngineError> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        let mut activations = Vec::with_capacity(self.layers.len());
        for (layer, p) in self.layers.iter().zip(params) {
            let pre = tape.affine(h, p.weight, p.bias)?;
            h = tape.activation(pre, layer.activation);
            activations.push(h);
        }
        Ok(MlpVars {
            output: h,
            activations,
        })
    }
}
