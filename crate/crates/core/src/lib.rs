//! Cooperative BEV perception for heterogeneous multi-LiDAR fleets.
//!
//! The crate covers the full desk-scale pipeline: synthetic scene and LiDAR
//! simulation, pillar-based BEV feature extraction with channel compression,
//! typed graph-attention and bidirectional cross-attention fusion, an
//! anchor-based detection head, rotated-IoU AP evaluation, and the experiment
//! harness (training, scenario evaluation, generalization sweeps, ablations).

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod evaluation;
pub mod nn;
pub mod scenario;
pub mod tensor;

pub use error::{Error, Result};
