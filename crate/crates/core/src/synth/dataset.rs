//! On-disk datasets of rendered scenes.
//!
//! Layout:
//!
//! ```text
//! manifest.json
//! scenes/00000/{front,right,back,left}.png gt.pfm mask.png scene.json
//! ```
//!
//! `gt.pfm` holds full-index ground truth on the equirectangular grid (0 where
//! the mask is off). Paths in the manifest are relative to the dataset root.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::camera::{RigCalibration, CAMERA_NAMES};
use crate::error::{Error, Result};
use crate::io::colormap::{save_gray, save_rgb};
use crate::io::pfm::{read_pfm, write_pfm, FloatMap};
use crate::sweep::SweepConfig;
use crate::tensor::Tensor;

use super::render::{gt_inverse_index, render_fisheye, FisheyeRender, GroundTruth};
use super::scene::{generate_scene, Preset, SceneSpec};

/// Test scenes draw seeds from a disjoint range.
pub const TEST_SEED_OFFSET: u64 = 1_000_000;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFiles {
    pub front: String,
    pub right: String,
    pub back: String,
    pub left: String,
    pub gt: String,
    pub mask: String,
    pub scene: String,
}

impl SceneFiles {
    pub fn images(&self) -> [&str; 4] {
        [&self.front, &self.right, &self.back, &self.left]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: usize,
    pub split: Split,
    pub seed: u64,
    pub files: SceneFiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub preset: Preset,
    pub rig: serde_json::Value,
    pub sweep: SweepConfig,
    pub scenes: Vec<SceneEntry>,
}

/// How many scenes to make and from which seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub train: usize,
    pub test: usize,
    pub preset: Preset,
    pub seed: u64,
}

/// Four renders plus ground truth for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSample {
    pub scene: SceneSpec,
    pub views: Vec<FisheyeRender>,
    pub gt: GroundTruth,
}

pub fn render_sample(scene: SceneSpec, rig: &RigCalibration, sweep: &SweepConfig) -> RenderedSample {
    let views = rig.cameras.iter().map(|c| render_fisheye(&scene, c)).collect();
    let gt = gt_inverse_index(&scene, rig, sweep);
    RenderedSample { scene, views, gt }
}

/// Structural checks on a rendered sample.
pub fn validate_sample(sample: &RenderedSample, sweep: &SweepConfig) -> Result<()> {
    let top = (sweep.num_spheres - 1) as f64;
    for (i, (&v, &m)) in sample.gt.index.iter().zip(&sample.gt.mask).enumerate() {
        if m && !(0.0..=top).contains(&v) {
            return Err(Error::InvalidInput(format!("gt index {v} out of range at pixel {i}")));
        }
    }
    if sample.gt.valid_fraction() < 0.8 {
        return Err(Error::InvalidInput(format!(
            "scene {} covers only {:.1}% of reference rays",
            sample.scene.seed,
            100.0 * sample.gt.valid_fraction()
        )));
    }
    for (cam, view) in CAMERA_NAMES.iter().zip(&sample.views) {
        if let Some(d) = view.depth.iter().find(|d| d.is_finite() && **d < sweep.min_depth) {
            return Err(Error::InvalidInput(format!(
                "{cam} view sees a surface at {d} m, closer than min_depth"
            )));
        }
    }
    Ok(())
}

fn rgb_image(view: &FisheyeRender) -> RgbImage {
    let raw = view.rgb.iter().flatten().copied().collect();
    RgbImage::from_raw(view.width as u32, view.height as u32, raw).expect("buffer size")
}

fn write_scene(root: &Path, entry: &SceneEntry, sample: &RenderedSample) -> Result<()> {
    let dir = root.join(Path::new(&entry.files.gt).parent().expect("scene dir"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (view, name) in sample.views.iter().zip(entry.files.images()) {
        save_rgb(&root.join(name), &rgb_image(view))?;
    }
    let gt = &sample.gt;
    write_pfm(
        &root.join(&entry.files.gt),
        &FloatMap::from_f64(gt.width, gt.height, &gt.index),
    )?;
    let mask = GrayImage::from_raw(
        gt.width as u32,
        gt.height as u32,
        gt.mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
    )
    .expect("buffer size");
    save_gray(&root.join(&entry.files.mask), &mask)?;
    let scene_path = root.join(&entry.files.scene);
    let text = serde_json::to_string_pretty(&sample.scene).expect("scene serializes");
    fs::write(&scene_path, text).map_err(|e| Error::io(&scene_path, e))
}

fn entry_for(id: usize, split: Split, seed: u64) -> SceneEntry {
    let dir = format!("scenes/{id:05}");
    let f = |name: &str| format!("{dir}/{name}");
    SceneEntry {
        id,
        split,
        seed,
        files: SceneFiles {
            front: f("front.png"),
            right: f("right.png"),
            back: f("back.png"),
            left: f("left.png"),
            gt: f("gt.pfm"),
            mask: f("mask.png"),
            scene: f("scene.json"),
        },
    }
}

/// Render and write `spec.train + spec.test` scenes under `root`.
pub fn make_dataset(spec: &DatasetSpec, rig: &RigCalibration, sweep: &SweepConfig, root: &Path) -> Result<Manifest> {
    rig.validate()?;
    sweep.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut scenes = Vec::with_capacity(spec.train + spec.test);
    let plan = (0..spec.train)
        .map(|i| (Split::Train, spec.seed + i as u64))
        .chain((0..spec.test).map(|i| (Split::Test, spec.seed + TEST_SEED_OFFSET + i as u64)));
    for (id, (split, seed)) in plan.enumerate() {
        let entry = entry_for(id, split, seed);
        let sample = render_sample(generate_scene(seed, spec.preset, rig, sweep), rig, sweep);
        validate_sample(&sample, sweep)?;
        write_scene(root, &entry, &sample)?;
        log::debug!("wrote scene {id} ({split:?}, seed {seed})");
        scenes.push(entry);
    }
    let manifest = Manifest {
        preset: spec.preset,
        rig: serde_json::from_str(&rig.to_json()).expect("rig json"),
        sweep: sweep.clone(),
        scenes,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// One scene ready for the network.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    /// `[3, h, w]` in `[0, 1]`, rig order.
    pub images: Vec<Tensor>,
    /// Full-index ground truth, `height × width`.
    pub gt: Vec<f64>,
    pub mask: Vec<bool>,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub rig: RigCalibration,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let rig = RigCalibration::from_json(&manifest.rig.to_string())?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            rig,
        })
    }

    pub fn entries(&self, split: Split) -> Vec<&SceneEntry> {
        self.manifest.scenes.iter().filter(|s| s.split == split).collect()
    }

    pub fn entry(&self, id: usize) -> Result<&SceneEntry> {
        self.manifest
            .scenes
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("dataset has no scene {id}")))
    }

    pub fn load(&self, entry: &SceneEntry) -> Result<Sample> {
        let (w, h) = self.rig.cameras[0].resolution;
        let mut images = Vec::with_capacity(4);
        for name in entry.files.images() {
            let path = self.root.join(name);
            let img = image::open(&path)
                .map_err(|e| Error::format(&path, e.to_string()))?
                .to_rgb8();
            if img.dimensions() != (w as u32, h as u32) {
                return Err(Error::format(&path, format!("expected {w}x{h} image")));
            }
            let plane = w * h;
            let mut data = vec![0.0; 3 * plane];
            for (i, px) in img.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = px.0[c] as f64 / 255.0;
                }
            }
            images.push(Tensor::from_vec(&[3, h, w], data));
        }
        let gt_path = self.root.join(&entry.files.gt);
        let gt = read_pfm(&gt_path)?;
        let mask_path = self.root.join(&entry.files.mask);
        let mask_img = image::open(&mask_path)
            .map_err(|e| Error::format(&mask_path, e.to_string()))?
            .to_luma8();
        let sweep = &self.manifest.sweep;
        if (gt.width, gt.height) != (sweep.out_width, sweep.out_height)
            || mask_img.dimensions() != (gt.width as u32, gt.height as u32)
        {
            return Err(Error::format(&gt_path, "ground truth size does not match the sweep"));
        }
        Ok(Sample {
            id: entry.id,
            images,
            gt: gt.to_f64(),
            mask: mask_img.pixels().map(|p| p.0[0] > 127).collect(),
            width: gt.width,
            height: gt.height,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.entries(split).into_iter().map(|e| self.load(e)).collect()
    }

    pub fn scene_spec(&self, entry: &SceneEntry) -> Result<SceneSpec> {
        let path = self.root.join(&entry.files.scene);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (RigCalibration, SweepConfig) {
        let sweep = SweepConfig {
            num_spheres: 32,
            out_width: 32,
            out_height: 8,
            ..SweepConfig::default()
        };
        (RigCalibration::default_rig().with_resolution(16, 16), sweep)
    }

    #[test]
    fn counts_split_labels_and_reload() {
        let (rig, sweep) = setup();
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            train: 10,
            test: 3,
            preset: Preset::Easy,
            seed: 0,
        };
        let m = make_dataset(&spec, &rig, &sweep, dir.path()).unwrap();
        assert_eq!(m.scenes.len(), 13);
        assert_eq!(m.scenes.iter().filter(|s| s.split == Split::Test).count(), 3);
        assert_eq!(m.scenes[10].seed, TEST_SEED_OFFSET);

        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.rig, rig);
        let s = ds.load(ds.entry(4).unwrap()).unwrap();
        assert_eq!(s.images.len(), 4);
        assert_eq!(s.images[0].shape(), &[3, 16, 16]);
        assert_eq!(s.gt.len(), 32 * 8);
        assert!(s.mask.iter().any(|&m| m));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (rig, sweep) = setup();
        let spec = DatasetSpec {
            train: 2,
            test: 1,
            preset: Preset::Medium,
            seed: 5,
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        make_dataset(&spec, &rig, &sweep, a.path()).unwrap();
        make_dataset(&spec, &rig, &sweep, b.path()).unwrap();
        for rel in [
            "manifest.json",
            "scenes/00002/gt.pfm",
            "scenes/00001/left.png",
            "scenes/00000/mask.png",
        ] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }
}
