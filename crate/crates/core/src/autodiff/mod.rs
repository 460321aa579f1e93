//! Dense tensors with a recorded-operation tape for reverse-mode gradients,
//! named parameter storage with Adam, and binary checkpoints.

mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, Moments, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{glorot_bound, AdamConfig, Param, ParamKey, ParamStore};
pub use tape::{shared_mlp, Activation, Gradients, Layer, Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;
