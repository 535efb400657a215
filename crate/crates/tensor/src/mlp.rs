//! Fully connected networks.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::matrix::Matrix;
use crate::tape::{sigmoid, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Some(match tag {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            2 => Activation::Sigmoid,
            3 => Activation::Identity,
            _ => return None,
        })
    }

    fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// One affine layer; `weight` is in×out so a batch maps as `X·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Multi-layer perceptron: `hidden` activation between layers, `output`
/// activation after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Tape handles of an [`Mlp`]'s parameters, in [`Mlp::params`] order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    vars: Vec<Var>,
}

impl MlpVars {
    pub fn as_slice(&self) -> &[Var] {
        &self.vars
    }
}

impl Mlp {
    /// Uniform fan-in initialisation `U(-1/√fan_in, 1/√fan_in)` with zero biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(TensorError::Shape(format!(
                "an MLP needs at least two positive layer sizes, got {sizes:?}"
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let data = (0..w[0] * w[1])
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Dense {
                    weight: Matrix::from_vec(w[0], w[1], data).expect("sized above"),
                    bias: Matrix::zeros(1, w[1]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    /// Builds from explicit layers, checking adjacent dimensions.
    pub fn from_layers(layers: Vec<Dense>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(TensorError::Shape("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(TensorError::Shape(format!("layer {i}: bias does not match weight")));
            }
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(TensorError::Shape(format!(
                    "layer {i} expects {} inputs but previous layer emits {}",
                    l.weight.rows(),
                    layers[i - 1].weight.cols()
                )));
            }
        }
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    /// Layer sizes, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.cols()));
        s
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Forward pass for a batch (one sample per row) without recording.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_dim() {
            return Err(TensorError::Shape(format!(
                "MLP expects {} inputs, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = x.matmul(&layer.weight)?;
            let act = self.activation_for(i);
            let bias = layer.bias.as_slice();
            for r in 0..y.rows() {
                for (v, b) in y.row_mut(r).iter_mut().zip(bias) {
                    *v = act.apply(*v + b);
                }
            }
            x = y;
        }
        Ok(x)
    }

    /// Forward pass for a single input vector.
    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::row_vector(input))?.into_vec())
    }

    /// Places every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            vars: self.params().into_iter().map(|p| tape.param(p.clone())).collect(),
        }
    }

    /// Places every parameter on the tape as a constant (no gradient).
    pub fn bind_frozen(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            vars: self
                .params()
                .into_iter()
                .map(|p| tape.constant(p.clone()))
                .collect(),
        }
    }

    /// Recorded forward pass using parameters previously placed by [`Mlp::bind`].
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Result<Var> {
        let cols = tape.value(input).cols();
        if cols != self.input_dim() {
            return Err(TensorError::Shape(format!(
                "MLP expects {} inputs, got {cols}",
                self.input_dim()
            )));
        }
        let mut x = input;
        for i in 0..self.layers.len() {
            let h = tape.matmul(x, vars.vars[2 * i])?;
            let h = tape.add_row(h, vars.vars[2 * i + 1])?;
            x = self.activation_for(i).on_tape(tape, h);
        }
        Ok(x)
    }
}

/// Forward pass that either records on `tape` or evaluates directly.
pub fn mlp_apply(mlp: &Mlp, input: &[f64], tape: Option<(&mut Tape, &MlpVars)>) -> Result<MlpOutput> {
    match tape {
        None => Ok(MlpOutput::Value(mlp.apply(input)?)),
        Some((tape, vars)) => {
            let x = tape.constant(Matrix::row_vector(input));
            Ok(MlpOutput::Recorded(mlp.forward_on_tape(tape, vars, x)?))
        }
    }
}

#[derive(Debug, Clone)]
pub enum MlpOutput {
    Value(Vec<f64>),
    Recorded(Var),
}
