//! File formats: named-array container, PFM, PLY, PNG color maps.

pub mod colormap;
pub mod container;
pub mod pfm;
pub mod ply;
