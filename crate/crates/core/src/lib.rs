//! Variable objective policy search from offline cart-pole data.
//!
//! The pipeline has two phases. First an ensemble of one-step dynamics models
//! is regressed on a fixed batch of random-policy transitions. Then a policy
//! that takes the reward parameters as extra inputs is trained by
//! backpropagating the discounted return of virtual rollouts through the
//! frozen ensemble.

pub mod cartpole;
pub mod config;
pub mod dataset;
pub mod diffcore;
pub mod ensemble;
mod error;
pub mod evaluator;
pub mod trainer;

pub use cartpole::{EnvState, Objective, PhysicsParams};
pub use dataset::{NormStats, Transition, TransitionBatch};
pub use diffcore::{Matrix, Mlp};
pub use ensemble::EnsembleModel;
pub use error::{Error, Result};
pub use trainer::{PolicyModel, TrainConfig};
