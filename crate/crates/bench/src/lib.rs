//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vop_core::cartpole::{sample_initial_state, sample_objective};
use vop_core::diffcore::OutputActivation;
use vop_core::{EnsembleModel, EnvState, Mlp, NormStats, Objective, PolicyModel};

pub fn norm() -> NormStats {
    NormStats {
        mu_s: [0.0; 4],
        sigma_s: [1.4, 1.8, 1.5, 3.0],
        mu_ds: [0.0; 4],
        sigma_ds: [0.03, 0.06, 0.2, 0.4],
    }
}

/// Untrained ensemble with the production member shape.
pub fn ensemble(k: usize) -> EnsembleModel {
    let members = (0..k as u64)
        .map(|s| Mlp::new(&[5, 20, 20, 4], OutputActivation::Identity, s).unwrap())
        .collect();
    let mut model = EnsembleModel::new(members, norm()).unwrap();
    model.set_frozen(true);
    model
}

pub fn policy(seed: u64) -> PolicyModel {
    PolicyModel::new(&norm(), &[10, 10], seed).unwrap()
}

pub fn population(n: usize, seed: u64) -> (Vec<EnvState>, Vec<Objective>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = (0..n).map(|_| sample_initial_state(&mut rng)).collect();
    let objectives = (0..n).map(|_| sample_objective(&mut rng)).collect();
    (starts, objectives)
}

pub fn actions(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}
