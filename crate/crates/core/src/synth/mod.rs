//! Procedural training data: analytic scenes, fisheye renders and
//! equirectangular ground truth.

pub mod dataset;
pub mod render;
pub mod scene;

pub use dataset::{make_dataset, Dataset, DatasetSpec, Manifest, RenderedSample, Sample, Split};
pub use render::{gt_inverse_index, render_fisheye, GroundTruth};
pub use scene::{generate_scene, Preset, SceneSpec};
