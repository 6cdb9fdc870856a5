//! Recurrent omnidirectional stereo matching from a rig of four outward-facing
//! fisheye cameras.
//!
//! The pipeline: a shared CNN extracts features from each fisheye image,
//! spherical sweeping warps them onto concentric spheres around the rig
//! center, opposite cameras are fused into reference and target volumes, and a
//! convolutional GRU refines an inverse-depth index map by looking up a
//! correlation pyramid.

pub mod autograd;
pub mod camera;
pub mod config;
pub mod corr;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod selftest;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod update;

pub use error::{Error, Result};
pub use tensor::Tensor;
