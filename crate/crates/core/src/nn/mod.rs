//! Minimal neural-network toolkit: tensors, a differentiation tape, layers,
//! optimizers and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::CheckpointManifest;
pub use layers::{BatchNorm, Conv2d, Embedding, Linear, LstmCell};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{ConvGeometry, Gradients, Padding, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
