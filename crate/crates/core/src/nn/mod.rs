//! Differentiable-computation substrate: tensors, parameters, a reverse-mode
//! tape, layers, Adam and the checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{Conv2d, LayerNorm, Linear, Mlp, Projection};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, Init, Param, ParamId, ParamStore};
pub use tape::{grad, grad_filtered, upper_pair_count, upper_pairs, ConvGeom, Tape, Var};
pub use tensor::{Real, Tensor};
