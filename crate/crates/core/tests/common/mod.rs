//! Finite-difference oracles shared by the gradient tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vop_core::cartpole::{EnvState, Objective};
use vop_core::diffcore::{GradientBuffer, Matrix, Mlp, OutputActivation, Tape};
use vop_core::trainer::{policy_gradient_check, TrainConfig};
use vop_core::{EnsembleModel, NormStats, PolicyModel};

pub const FD_STEP: f64 = 1e-5;

/// Scalar loss `sum(w .* net(x))` with fixed weights `w`.
pub fn weighted_output(net: &Mlp, x: &Matrix, w: &Matrix) -> f64 {
    let y = net.forward_batch(x).unwrap();
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

pub fn taped_gradient(net: &Mlp, x: &Matrix, w: &Matrix) -> (Vec<f64>, Matrix) {
    let mut tape = Tape::new();
    let p = tape.register(net, true);
    let xi = tape.leaf(x.clone());
    let y = tape.mlp(p, xi).unwrap();
    let yw = tape.mul_const(y, w.clone()).unwrap();
    let l = tape.sum_all(yw);
    let g = tape.backward(l, 1.0).unwrap();
    let mut buf = GradientBuffer::zeros_like(net);
    g.accumulate_into(p, &mut buf).unwrap();
    (buf.values(), g.wrt(xi).unwrap().clone())
}

pub fn perturbed(net: &Mlp, index: usize, delta: f64) -> Mlp {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut i = 0;
    for layer in net.layers() {
        let mut w = layer.weights().data().to_vec();
        for v in &mut w {
            if i == index {
                *v += delta;
            }
            i += 1;
        }
        let mut b = layer.bias().to_vec();
        for v in &mut b {
            if i == index {
                *v += delta;
            }
            i += 1;
        }
        weights.push(w);
        biases.push(b);
    }
    Mlp::from_parts(net.dims(), net.output_activation(), weights, biases).unwrap()
}

/// Same weights with biases drawn from `U(-0.5, 0.5)`, keeping finite
/// differences away from rectifier kinks at exactly zero.
pub fn with_random_biases(net: &Mlp, seed: u64) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = net.layers().iter().map(|l| l.weights().data().to_vec()).collect();
    let biases = net
        .layers()
        .iter()
        .map(|l| (0..l.out_dim()).map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect();
    Mlp::from_parts(net.dims(), net.output_activation(), weights, biases).unwrap()
}

/// Relative error with an absolute floor suited to the finite-difference noise.
pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-4 * a.abs().max(b.abs()) || (a - b).abs() < 1e-7
}

/// Checks every parameter and input gradient of a random net against central
/// differences, returning the number of mismatches.
pub fn mlp_mismatches(dims: &[usize], seed: u64, act: OutputActivation) -> usize {
    let net = with_random_biases(&Mlp::new(dims, act, seed).unwrap(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let n = 3;
    let x = Matrix::from_vec(n, dims[0], (0..n * dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect());
    let out = dims[dims.len() - 1];
    let w = Matrix::from_vec(n, out, (0..n * out).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (grad, gx) = taped_gradient(&net, &x, &w);
    let mut bad = 0;
    for (i, g) in grad.iter().enumerate() {
        let fd = (weighted_output(&perturbed(&net, i, FD_STEP), &x, &w)
            - weighted_output(&perturbed(&net, i, -FD_STEP), &x, &w))
            / (2.0 * FD_STEP);
        bad += usize::from(!close(*g, fd));
    }
    for i in 0..x.data().len() {
        let mut up = x.clone();
        up.data_mut()[i] += FD_STEP;
        let mut down = x.clone();
        down.data_mut()[i] -= FD_STEP;
        let fd = (weighted_output(&net, &up, &w) - weighted_output(&net, &down, &w)) / (2.0 * FD_STEP);
        bad += usize::from(!close(gx.data()[i], fd));
    }
    bad
}

pub fn toy_norm() -> NormStats {
    NormStats {
        mu_s: [0.0, 0.0, 0.0, 0.0],
        sigma_s: [1.4, 1.8, 1.5, 3.0],
        mu_ds: [0.0, 0.0, 0.0, 0.0],
        sigma_ds: [0.03, 0.06, 0.2, 0.4],
    }
}

pub fn toy_ensemble(seed: u64) -> EnsembleModel {
    let members = (0..3)
        .map(|k| with_random_biases(&Mlp::new(&[5, 8, 8, 4], OutputActivation::Identity, seed * 10 + k).unwrap(), seed + k))
        .collect();
    EnsembleModel::new(members, toy_norm()).unwrap()
}

pub fn pairs(n: usize, seed: u64) -> (Vec<EnvState>, Vec<Objective>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = (0..n)
        .map(|_| {
            EnvState::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-2.0..2.0),
            )
        })
        .collect();
    let objs = (0..n).map(|_| Objective::new(rng.random_range(-2.0..2.0), rng.random_range(0.0..4.0))).collect();
    (starts, objs)
}

pub fn rollout_check(horizon: usize, gamma: f64, seed: u64) -> f64 {
    let model = toy_ensemble(seed);
    let net = Mlp::new(&[6, 6, 6, 1], OutputActivation::Tanh, seed).unwrap();
    let policy = PolicyModel::from_net(with_random_biases(&net, seed), &toy_norm()).unwrap();
    let (starts, objs) = pairs(4, seed + 100);
    let cfg = TrainConfig {
        horizon,
        gamma,
        chunk_size: 2,
        ..TrainConfig::default()
    };
    policy_gradient_check(&policy, &model, &starts, &objs, &cfg, 1e-5).unwrap()
}

