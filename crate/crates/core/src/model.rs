//! Fully-connected ReLU classifier and the magnitude/direction split of its
//! logits.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};
use crate::tensor::{l2_norm, GradTape, Matrix, Var};

pub mod checkpoint;

/// An MLP with ReLU hidden layers and a linear output layer.
///
/// Layer `l` maps `x -> x W_l + b_l` with `W_l` of shape
/// `layer_dims[l] x layer_dims[l + 1]` and `b_l` a `1 x layer_dims[l + 1]` row.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

/// A forward pass recorded on a tape.
pub struct TracedForward {
    pub tape: GradTape,
    pub input: Var,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    /// Activations feeding the output layer.
    pub penultimate: Var,
    pub logits: Var,
}

impl MlpModel {
    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`) and zero
    /// biases, deterministic in `seed`.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = stream_rng(seed, streams::INIT);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            weights.push(Matrix::from_vec(fan_in, fan_out, data)?);
            biases.push(Matrix::zeros(1, fan_out));
        }
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parameters(layer_dims: Vec<usize>, weights: Vec<Matrix>, biases: Vec<Matrix>) -> Result<Self> {
        validate_dims(&layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Config(format!(
                "{layers} layers need {layers} weights and biases, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_dims.windows(2).enumerate() {
            if weights[l].shape() != (pair[0], pair[1]) {
                return Err(Error::shape(
                    "from_parameters",
                    format!("layer {l} weight is {:?}, expected {:?}", weights[l].shape(), (pair[0], pair[1])),
                ));
            }
            if biases[l].shape() != (1, pair[1]) {
                return Err(Error::shape(
                    "from_parameters",
                    format!("layer {l} bias is {:?}, expected {:?}", biases[l].shape(), (1, pair[1])),
                ));
            }
        }
        Ok(MlpModel {
            layer_dims,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    pub(crate) fn parameters_mut(&mut self) -> (&mut [Matrix], &mut [Matrix]) {
        (&mut self.weights, &mut self.biases)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("input has {} features, model expects {}", x.cols(), self.input_dim()),
            ));
        }
        Ok(())
    }

    /// Logits for a batch (`batch x k`), without recording a tape.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_with_features(x)?.1)
    }

    /// Returns `(penultimate activations, logits)`.
    pub fn forward_with_features(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(x)?;
        let last = self.num_layers() - 1;
        let mut h = x.clone();
        for l in 0..last {
            h = h.matmul(&self.weights[l])?.add_row_vector(&self.biases[l])?.relu();
        }
        let logits = h.matmul(&self.weights[last])?.add_row_vector(&self.biases[last])?;
        Ok((h, logits))
    }

    /// Records the forward pass on a fresh tape. Parameters always require
    /// gradients; the input does only when `input_grad` is set.
    pub fn forward_traced(&self, x: &Matrix, input_grad: bool) -> Result<TracedForward> {
        self.check_input(x)?;
        let mut tape = GradTape::new();
        let input = tape.leaf(x.clone(), input_grad);
        let weights: Vec<Var> = self.weights.iter().map(|w| tape.leaf(w.clone(), true)).collect();
        let biases: Vec<Var> = self.biases.iter().map(|b| tape.leaf(b.clone(), true)).collect();
        let last = self.num_layers() - 1;
        let mut h = input;
        for l in 0..last {
            let z = tape.matmul(h, weights[l])?;
            let z = tape.add_row_bias(z, biases[l])?;
            h = tape.relu(z);
        }
        let z = tape.matmul(h, weights[last])?;
        let logits = tape.add_row_bias(z, biases[last])?;
        Ok(TracedForward {
            tape,
            input,
            weights,
            biases,
            penultimate: h,
            logits,
        })
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "a model needs at least input and output dims, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Config(format!("layer dims must be positive, got {layer_dims:?}")));
    }
    Ok(())
}

/// `f = magnitude * direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDecomposition {
    pub magnitude: f64,
    /// Unit vector, or all zeros when `degenerate`.
    pub direction: Vec<f64>,
    /// Set for the zero vector, whose direction is undefined.
    pub degenerate: bool,
}

impl LogitDecomposition {
    pub fn reconstruct(&self) -> Vec<f64> {
        self.direction.iter().map(|d| d * self.magnitude).collect()
    }
}

pub fn decompose(logits: &[f64]) -> LogitDecomposition {
    let magnitude = l2_norm(logits);
    if magnitude == 0.0 {
        return LogitDecomposition {
            magnitude,
            direction: vec![0.0; logits.len()],
            degenerate: true,
        };
    }
    LogitDecomposition {
        magnitude,
        direction: logits.iter().map(|v| v / magnitude).collect(),
        degenerate: false,
    }
}
