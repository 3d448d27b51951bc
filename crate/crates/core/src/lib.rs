//! Second-stage refinement of 3D detection proposals with LiDAR-camera
//! fusion: RoI feature extraction, attention-based encoding, box and
//! confidence refinement, plus the synthetic data substrate, training loop
//! and KITTI-style evaluation that make the whole pipeline verifiable on a
//! desk.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod evalkit;
pub mod geometry;
pub mod model;
pub mod roi;
pub mod scene;
pub mod train;
