//! Minimal CPU training engine for small 3D convolutional networks.
//!
//! Layers expose explicit `forward`/`backward` pairs; models compose them
//! and keep whatever activations their backward pass needs.

pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod unet;

pub use checkpoint::{config_hash, Checkpoint};
pub use conv::Conv3d;
pub use layers::{sigmoid, BatchNorm3d};
pub use optim::{clip_grad_norm, Sgd, StepLr};
pub use param::{Buffer, Module, Param};
pub use tensor::{voxel_count, Dims, Tensor};
