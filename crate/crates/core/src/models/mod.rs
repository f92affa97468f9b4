//! Multilayer-perceptron classifiers used for both teacher and student.

mod checkpoint;
mod swa;
mod teacher;

pub use checkpoint::{VERSION as CHECKPOINT_VERSION, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use swa::SwaState;
pub use teacher::{emulate_teacher, Teacher, TeacherEmulation};

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{softmax, ProbBatch, Tensor};

/// Anything that maps a batch of inputs to class logits on a tape.
pub trait Classifier {
    /// `labels` is only consulted by label-aware teacher emulations.
    fn logits_on(&self, tape: &mut Tape, x: Var, labels: &[usize]) -> Result<Var>;
    fn input_dim(&self) -> usize;
    fn classes(&self) -> usize;

    fn logits(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = self.logits_on(&mut tape, xv, labels)?;
        Ok(tape.value(z).clone())
    }

    fn probs(&self, x: &Tensor, labels: &[usize]) -> Result<ProbBatch> {
        softmax(&self.logits(x, labels)?)
    }
}

/// Weights and biases of an MLP with layer sizes `[d₀, …, d_L]`.
///
/// Layer `i` holds a `d_{i+1} × d_i` weight matrix and a `1 × d_{i+1}` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "an MLP needs at least two layer sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl ModelParams {
    pub fn new(layer_sizes: Vec<usize>, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Dimension(format!(
                "{layers} layers but {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        for i in 0..layers {
            let (d_in, d_out) = (layer_sizes[i], layer_sizes[i + 1]);
            if weights[i].dims2() != (d_out, d_in) || biases[i].dims2() != (1, d_out) {
                return Err(Error::Dimension(format!(
                    "layer {i}: expected weight {d_out}x{d_in} and bias 1x{d_out}"
                )));
            }
            if !weights[i].all_finite() || !biases[i].all_finite() {
                return Err(Error::Numeric(format!("layer {i} has non-finite entries")));
            }
        }
        Ok(ModelParams {
            layer_sizes,
            weights,
            biases,
        })
    }

    /// Scaled-uniform init: weights ~ U(−1/√fan_in, 1/√fan_in), zero biases.
    pub fn init_mlp(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = rng::seeded(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (d_in, d_out) = (pair[0], pair[1]);
            let bound = 1.0 / (d_in as f64).sqrt();
            let data = (0..d_in * d_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(Tensor::matrix(d_out, d_in, data)?);
            biases.push(Tensor::zeros(&[1, d_out]));
        }
        ModelParams::new(layer_sizes.to_vec(), weights, biases)
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|p| Tensor::zeros(&[p[1], p[0]]))
            .collect();
        let biases = layer_sizes[1..]
            .iter()
            .map(|&d| Tensor::zeros(&[1, d]))
            .collect();
        ModelParams::new(layer_sizes.to_vec(), weights, biases)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .chain(&self.biases)
            .map(Tensor::numel)
            .sum()
    }

    /// Parameter tensors in storage order: `w₀, b₀, w₁, b₁, …`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.layer_sizes == other.layer_sizes
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    /// Places the parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            weights.push(tape.leaf(w.clone(), requires_grad));
            biases.push(tape.leaf(b.clone(), requires_grad));
        }
        BoundParams { weights, biases }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.bind(tape, false).forward(tape, x)
    }
}

impl Classifier for ModelParams {
    fn logits_on(&self, tape: &mut Tape, x: Var, _labels: &[usize]) -> Result<Var> {
        self.forward(tape, x)
    }

    fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Model parameters living on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl BoundParams {
    /// Affine → ReLU for every hidden layer, final affine produces logits.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.weights.len() - 1;
        let mut h = x;
        for (i, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = tape.linear(h, w, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Gradients in storage order, zeros where the loss did not reach.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .map(|v| {
                tape.grad(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}
