//! Small reverse-mode tensor library: 3D convolutions, normalization,
//! activations, a parameter store, AdamW and checkpoints.
//!
//! Values are `f64` throughout; checkpoints narrow to `f32` on disk.

mod checkpoint;
mod graph;
mod init;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointHeader, RngState, TensorEntry};
pub use graph::{Graph, Var};
pub use init::{kaiming_init, kaiming_normal};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::ParamStore;
pub use tensor::Tensor;

