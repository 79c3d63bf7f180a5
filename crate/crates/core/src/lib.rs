//! Lossless geometry codec for quantized LiDAR point clouds.
//!
//! The pipeline builds an octree over voxelized coordinates, predicts the
//! 255-way occupancy-code distribution of each node with a sparse neural
//! context model (re-densification folding plus cross-scale feature
//! propagation), and drives a bit-exact range coder with those
//! distributions. Everything the codec needs at decode time travels in a
//! self-describing bitstream header plus an out-of-band checkpoint.

pub mod codec;
pub mod context;
pub mod entropy;
pub mod error;
pub mod metrics;
pub mod octree;
pub mod pcio;
pub mod report;
pub mod sparse_nn;
pub mod synth;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
