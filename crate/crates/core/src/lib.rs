//! Depth-aware LiDAR-camera fusion on bird's-eye-view grids.
//!
//! The crate is `no_std` (with `alloc`) and purely computational: tensors
//! and a reverse-mode tape, the BEV depth matrix and its sinusoidal
//! encoding, geometry kernels (voxelization, lift-splat, RoI align, box
//! pooling), the global and local fusion blocks, a synthetic scene
//! generator, and a toy training loop. File formats and the CLI live in
//! the `depthfusion` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
mod math;
pub mod tensor;
pub mod nn;
pub mod depth;
pub mod geometry;
pub mod dgf;
pub mod dlf;
pub mod scene;
pub mod model;
pub mod train;
pub mod experiment;
pub mod tape;
pub mod gradcheck;

pub use error::{Error, Result};
pub use tape::{AttentionScope, Gradients, RowEntry, Tape, Var};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
