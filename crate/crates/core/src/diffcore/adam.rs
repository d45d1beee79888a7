use serde::{Deserialize, Serialize};

use super::{Matrix, Mlp};
use crate::error::{Error, Result};

/// Gradient accumulators shaped like an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub(crate) weights: Vec<Matrix>,
    pub(crate) biases: Vec<Vec<f64>>,
}

impl GradientBuffer {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .layers()
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: net.layers().iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn weights(&self, layer: usize) -> &Matrix {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    /// Flattened in the same order as [`Mlp::params`].
    pub fn values(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.data().iter().chain(b).copied())
            .collect()
    }

    pub fn is_congruent(&self, net: &Mlp) -> bool {
        self.weights.len() == net.layers().len()
            && net
                .layers()
                .iter()
                .zip(self.weights.iter().zip(&self.biases))
                .all(|(l, (w, b))| w.shape() == l.weights().shape() && b.len() == l.out_dim())
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.values().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn zero(&mut self) {
        self.scale(0.0);
    }

    fn first_non_finite_block(&self) -> Option<String> {
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if !w.is_finite() {
                return Some(format!("layer {i} weights"));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Some(format!("layer {i} bias"));
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.learning_rate.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidHyperparameter(format!("{self:?}")))
        }
    }
}

/// Bias-corrected Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let n = net.param_count();
        Ok(Self {
            config,
            step_count: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, net: &mut Mlp, grads: &GradientBuffer) -> Result<()> {
        if !grads.is_congruent(net) || self.first_moment.len() != net.param_count() {
            return Err(Error::DimensionMismatch {
                context: "adam gradient buffer",
                expected: net.param_count(),
                got: grads.values().len(),
            });
        }
        if let Some(block) = grads.first_non_finite_block() {
            return Err(Error::NonFiniteGradient(block));
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let mut idx = 0;
        for (layer, (gw, gb)) in net
            .layers_mut()
            .iter_mut()
            .zip(grads.weights.iter().zip(&grads.biases))
        {
            let params = layer
                .weights
                .data_mut()
                .iter_mut()
                .zip(gw.data())
                .chain(layer.bias.iter_mut().zip(gb));
            for (p, &g) in params {
                let m = &mut self.first_moment[idx];
                let v = &mut self.second_moment[idx];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                idx += 1;
            }
        }
        Ok(())
    }
}
