use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Rectifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

impl OutputActivation {
    #[inline]
    pub(crate) fn apply(self, v: f64) -> f64 {
        match self {
            OutputActivation::Identity => v,
            OutputActivation::Tanh => v.tanh(),
        }
    }
}

/// One affine layer `y = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) weights: Matrix,
    pub(crate) bias: Vec<f64>,
}

impl Layer {
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    /// `out[r] = W x[r] + b` for every row of `input`.
    pub(crate) fn affine(&self, input: &Matrix) -> Matrix {
        let (n, in_dim) = input.shape();
        let out_dim = self.out_dim();
        debug_assert_eq!(in_dim, self.in_dim());
        let mut out = Matrix::zeros(n, out_dim);
        for r in 0..n {
            let x = input.row(r);
            let y = out.row_mut(r);
            for (o, yo) in y.iter_mut().enumerate() {
                let w = self.weights.row(o);
                let mut acc = self.bias[o];
                for (wi, xi) in w.iter().zip(x) {
                    acc += wi * xi;
                }
                *yo = acc;
            }
        }
        out
    }
}

/// Fully connected feed-forward network with rectifier hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Layer>,
    hidden_activation: HiddenActivation,
    output_activation: OutputActivation,
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidDims(dims.to_vec()));
    }
    Ok(())
}

impl Mlp {
    /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
    pub fn new(dims: &[usize], output_activation: OutputActivation, seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Layer {
                    weights: Matrix::from_vec(fan_out, fan_in, data),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
            hidden_activation: HiddenActivation::Rectifier,
            output_activation,
        })
    }

    /// Builds a network from explicit per-layer weights (row-major `(out, in)`) and biases.
    pub fn from_parts(
        dims: &[usize],
        output_activation: OutputActivation,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        validate_dims(dims)?;
        let n_layers = dims.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::DimensionMismatch {
                context: "layer count",
                expected: n_layers,
                got: weights.len().min(biases.len()),
            });
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (i, (w, b)) in weights.into_iter().zip(biases).enumerate() {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            if w.len() != fan_in * fan_out {
                return Err(Error::DimensionMismatch {
                    context: "layer weights",
                    expected: fan_in * fan_out,
                    got: w.len(),
                });
            }
            if b.len() != fan_out {
                return Err(Error::DimensionMismatch {
                    context: "layer bias",
                    expected: fan_out,
                    got: b.len(),
                });
            }
            if w.iter().chain(&b).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
            layers.push(Layer {
                weights: Matrix::from_vec(fan_out, fan_in, w),
                bias: b,
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            layers,
            hidden_activation: HiddenActivation::Rectifier,
            output_activation,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// Iterates all parameters in layer order, weights before bias.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(&l.bias).copied())
    }

    pub(crate) fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut index = index;
        for l in &mut self.layers {
            let nw = l.weights.data().len();
            if index < nw {
                return &mut l.weights.data_mut()[index];
            }
            index -= nw;
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, input.len(), input.to_vec());
        Ok(self.forward_batch(&m)?.into_vec())
    }

    /// Evaluates every row of `input` independently.
    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp input",
                expected: self.input_dim(),
                got: input.cols(),
            });
        }
        if !input.is_finite() {
            return Err(Error::NonFinite("mlp input".into()));
        }
        Ok(self.forward_unchecked(input))
    }

    pub(crate) fn forward_unchecked(&self, input: &Matrix) -> Matrix {
        let last = self.layers.len() - 1;
        let mut h = self.layers[0].affine(input);
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = layer.affine(&h);
            }
            if i < last {
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            } else if self.output_activation != OutputActivation::Identity {
                let act = self.output_activation;
                h.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        h
    }

    /// SHA-256 over the bit patterns of every parameter, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for d in &self.dims {
            hasher.update((*d as u64).to_le_bytes());
        }
        for p in self.params() {
            hasher.update(p.to_bits().to_le_bytes());
        }
        hex(&hasher.finalize())
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            dims: self.dims.clone(),
            output_activation: self.output_activation,
            weights: self
                .layers
                .iter()
                .map(|l| l.weights.data().to_vec())
                .collect(),
            biases: self.layers.iter().map(|l| l.bias.clone()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: MlpCheckpoint) -> Result<Self> {
        Self::from_parts(&ckpt.dims, ckpt.output_activation, ckpt.weights, ckpt.biases)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

/// On-disk form of an [`Mlp`]. Weights are row-major `(out, in)` per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub dims: Vec<usize>,
    pub output_activation: OutputActivation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
