//! Dense-network numerics: forward evaluation, reverse-mode gradients and Adam.

mod adam;
mod matrix;
mod mlp;
mod tape;

pub use adam::{AdamConfig, AdamState, GradientBuffer};
pub use matrix::Matrix;
pub use mlp::{HiddenActivation, Layer, Mlp, MlpCheckpoint, OutputActivation};
pub use tape::{wrap_into, Gradients, NodeId, ParamId, Tape};

pub(crate) use mlp::hex;
