//! Spherical sweeping: sampling grids over concentric spheres around the rig
//! reference point, and bilinear warping of fisheye feature maps onto them.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::camera::{FisheyeCamera, RigCalibration};
use crate::error::{Error, Result};
use crate::io::container::{ArrayData, NamedArrays};
use crate::tensor::Tensor;

/// Value written into grid embeddings where a camera does not see the cell.
pub const INVALID_EMBED: f64 = -2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Number of predefined inverse-depth values N.
    pub num_spheres: usize,
    /// Meters; the largest swept inverse depth is `1 / min_depth`.
    pub min_depth: f64,
    /// Full-resolution equirectangular output width W.
    pub out_width: usize,
    /// Full-resolution equirectangular output height H.
    pub out_height: usize,
    pub phi_min: f64,
    pub phi_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            num_spheres: 192,
            min_depth: 0.6,
            out_width: 640,
            out_height: 160,
            phi_min: -PI / 4.0,
            phi_max: PI / 4.0,
            theta_min: -PI,
            theta_max: PI,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_spheres < 4 || !self.num_spheres.is_multiple_of(2) {
            return bad(format!("num_spheres {} must be even and >= 4", self.num_spheres));
        }
        if self.out_width == 0 || self.out_height == 0 || !self.out_width.is_multiple_of(2) || !self.out_height.is_multiple_of(2) {
            return bad(format!(
                "output size {}x{} must be positive and even",
                self.out_width, self.out_height
            ));
        }
        if !(self.min_depth.is_finite() && self.min_depth > 0.0) {
            return bad(format!("min_depth {} must be positive", self.min_depth));
        }
        let half_pi = PI / 2.0;
        if !(self.phi_min > -half_pi && self.phi_max < half_pi && self.phi_min < self.phi_max) {
            return bad(format!(
                "phi range [{}, {}] must lie inside (-pi/2, pi/2)",
                self.phi_min, self.phi_max
            ));
        }
        if !(self.theta_min < self.theta_max && self.theta_max - self.theta_min <= 2.0 * PI + 1e-12) {
            return bad(format!(
                "theta range [{}, {}] is invalid",
                self.theta_min, self.theta_max
            ));
        }
        Ok(())
    }

    /// d_max in 1/m.
    pub fn max_inverse_depth(&self) -> f64 {
        1.0 / self.min_depth
    }

    /// Number of spheres actually warped (every other one).
    pub fn half_spheres(&self) -> usize {
        self.num_spheres / 2
    }

    pub fn half_size(&self) -> (usize, usize) {
        (self.out_height / 2, self.out_width / 2)
    }

    /// Azimuth of column `j` on a grid with `cols` columns (pixel centers).
    pub fn theta(&self, j: usize, cols: usize) -> f64 {
        self.theta_min + (j as f64 + 0.5) * (self.theta_max - self.theta_min) / cols as f64
    }

    /// Elevation of row `k` on a grid with `rows` rows (pixel centers).
    pub fn phi(&self, k: usize, rows: usize) -> f64 {
        self.phi_min + (k as f64 + 0.5) * (self.phi_max - self.phi_min) / rows as f64
    }

    /// Full-index value of inverse depth `inv` (1/m).
    pub fn index_of_inverse_depth(&self, inv: f64) -> f64 {
        inv / self.max_inverse_depth() * (self.num_spheres - 1) as f64
    }

    /// Inverse depth (1/m) of a full-index value.
    pub fn inverse_depth_of_index(&self, idx: f64) -> f64 {
        idx * self.max_inverse_depth() / (self.num_spheres - 1) as f64
    }
}

/// `(cos φ cos θ, sin φ, cos φ sin θ)`
pub fn unit_ray(theta: f64, phi: f64) -> Vector3<f64> {
    Vector3::new(phi.cos() * theta.cos(), phi.sin(), phi.cos() * theta.sin())
}

/// `d_n = n · d_max / (N − 1)` for `n = 0..N`.
pub fn inverse_depth_schedule(cfg: &SweepConfig) -> Vec<f64> {
    let n = cfg.num_spheres;
    let d_max = cfg.max_inverse_depth();
    (0..n)
        .map(|i| {
            if i == n - 1 {
                d_max
            } else {
                i as f64 * d_max / (n - 1) as f64
            }
        })
        .collect()
}

/// Sampling grid of one camera over the half-resolution sphere stack.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrids {
    /// `(rows, cols, spheres)` = `(H/2, W/2, N/2)`.
    pub dims: (usize, usize, usize),
    /// `[H/2, W/2, N/2, 2]` normalized `(x, y)` in `[-1, 1]`.
    pub coords: Tensor,
    /// Same as `coords` with invalid cells set to [`INVALID_EMBED`].
    pub grid_embed: Tensor,
    /// `[H/2 · W/2 · N/2]`, row-major over `(row, col, sphere)`.
    pub valid: Vec<bool>,
    /// All N inverse depths; sphere `s` of the grid uses `schedule[2 s]`.
    pub schedule: Vec<f64>,
}

impl SweepGrids {
    pub fn cell(&self, row: usize, col: usize, sphere: usize) -> usize {
        let (_, w, d) = self.dims;
        (row * w + col) * d + sphere
    }

    pub fn coverage(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }
}

/// Normalize a pixel coordinate to `[-1, 1]` with -1/+1 on the first/last pixel centers.
pub fn normalize_pixel(pixel: [f64; 2], resolution: (usize, usize)) -> [f64; 2] {
    [
        2.0 * pixel[0] / (resolution.0 - 1) as f64 - 1.0,
        2.0 * pixel[1] / (resolution.1 - 1) as f64 - 1.0,
    ]
}

fn build_camera_grid(cam: &FisheyeCamera, reference: &Vector3<f64>, cfg: &SweepConfig, schedule: &[f64]) -> SweepGrids {
    let (rows, cols) = cfg.half_size();
    let spheres = cfg.half_spheres();
    let cells = rows * cols * spheres;
    let mut coords = vec![0.0; cells * 2];
    let mut embed = vec![INVALID_EMBED; cells * 2];
    let mut valid = vec![false; cells];
    // p_cam = R (ref + ray / d) + t, scaled by d: d (R ref + t) + R ray.
    // Scaling leaves the equidistant projection unchanged and covers d = 0.
    let offset = cam.rotation * reference + cam.translation;
    for k in 0..rows {
        let phi = cfg.phi(k, rows);
        for j in 0..cols {
            let ray = cam.rotation * unit_ray(cfg.theta(j, cols), phi);
            for s in 0..spheres {
                let d = schedule[2 * s];
                let proj = cam.project_camera_frame(&(ray + offset * d));
                let cell = (k * cols + j) * spheres + s;
                let norm = normalize_pixel(proj.pixel, cam.resolution);
                if proj.valid {
                    coords[2 * cell] = norm[0];
                    coords[2 * cell + 1] = norm[1];
                    embed[2 * cell] = norm[0];
                    embed[2 * cell + 1] = norm[1];
                    valid[cell] = true;
                } else {
                    coords[2 * cell] = norm[0].clamp(-1.0, 1.0);
                    coords[2 * cell + 1] = norm[1].clamp(-1.0, 1.0);
                }
            }
        }
    }
    let shape = [rows, cols, spheres, 2];
    SweepGrids {
        dims: (rows, cols, spheres),
        coords: Tensor::from_vec(&shape, coords),
        grid_embed: Tensor::from_vec(&shape, embed),
        valid,
        schedule: schedule.to_vec(),
    }
}

/// Sampling grids for all four cameras, in rig order.
pub fn build_grids(rig: &RigCalibration, cfg: &SweepConfig) -> Result<Vec<SweepGrids>> {
    rig.validate()?;
    cfg.validate()?;
    let schedule = inverse_depth_schedule(cfg);
    let reference = rig.reference();
    Ok(rig
        .cameras
        .iter()
        .map(|cam| build_camera_grid(cam, &reference, cfg, &schedule))
        .collect())
}

fn cache_key(rig: &RigCalibration, cfg: &SweepConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(rig.to_json().as_bytes());
    hasher.update(serde_json::to_string(cfg).expect("config serializes").as_bytes());
    hasher.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Path of the cached grids for this rig and configuration inside `dir`.
pub fn grid_cache_path(dir: &Path, rig: &RigCalibration, cfg: &SweepConfig) -> PathBuf {
    dir.join(format!("grids-{}.rsg", cache_key(rig, cfg)))
}

pub fn grids_to_arrays(grids: &[SweepGrids]) -> NamedArrays {
    let mut arrays = NamedArrays::new();
    for (slot, g) in grids.iter().enumerate() {
        let (h, w, d) = g.dims;
        arrays.insert(format!("coords.{slot}"), ArrayData::F64(g.coords.clone()));
        arrays.insert(
            format!("valid.{slot}"),
            ArrayData::U8 {
                shape: vec![h, w, d],
                data: g.valid.iter().map(|&v| v as u8).collect(),
            },
        );
        if slot == 0 {
            arrays.insert(
                "schedule".to_string(),
                ArrayData::F64(Tensor::from_vec(&[g.schedule.len()], g.schedule.clone())),
            );
        }
    }
    arrays
}

pub fn grids_from_arrays(arrays: &NamedArrays, path: &Path) -> Result<Vec<SweepGrids>> {
    let schedule = arrays.f64("schedule", path)?.data().to_vec();
    (0..4)
        .map(|slot| {
            let coords = arrays.f64(&format!("coords.{slot}"), path)?.clone();
            let (shape, data) = arrays.u8(&format!("valid.{slot}"), path)?;
            if shape.len() != 3 || coords.shape() != [shape[0], shape[1], shape[2], 2] {
                return Err(Error::format(path, "grid array shapes disagree"));
            }
            let valid: Vec<bool> = data.iter().map(|&v| v != 0).collect();
            let mut embed = coords.clone();
            for (cell, &ok) in valid.iter().enumerate() {
                if !ok {
                    embed.data_mut()[2 * cell] = INVALID_EMBED;
                    embed.data_mut()[2 * cell + 1] = INVALID_EMBED;
                }
            }
            Ok(SweepGrids {
                dims: (shape[0], shape[1], shape[2]),
                coords,
                grid_embed: embed,
                valid,
                schedule: schedule.clone(),
            })
        })
        .collect()
}

/// Build grids, reusing a cached copy from `cache_dir` when one exists.
pub fn load_or_build_grids(
    rig: &RigCalibration,
    cfg: &SweepConfig,
    cache_dir: Option<&Path>,
) -> Result<Vec<SweepGrids>> {
    let Some(dir) = cache_dir else {
        return build_grids(rig, cfg);
    };
    let path = grid_cache_path(dir, rig, cfg);
    if path.exists() {
        let arrays = NamedArrays::read(&path)?;
        return grids_from_arrays(&arrays, &path);
    }
    let grids = build_grids(rig, cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    grids_to_arrays(&grids).write(&path)?;
    Ok(grids)
}

#[derive(Clone, Copy)]
struct Tap {
    idx: [usize; 4],
    w: [f64; 4],
}

fn bilinear_tap(x: f64, y: f64, wf: usize, hf: usize) -> Tap {
    let u = ((x + 1.0) / 2.0 * (wf - 1) as f64).clamp(0.0, (wf - 1) as f64);
    let v = ((y + 1.0) / 2.0 * (hf - 1) as f64).clamp(0.0, (hf - 1) as f64);
    let x0 = (u.floor() as usize).min(wf.saturating_sub(2));
    let y0 = (v.floor() as usize).min(hf.saturating_sub(2));
    let x1 = (x0 + 1).min(wf - 1);
    let y1 = (y0 + 1).min(hf - 1);
    let tx = u - x0 as f64;
    let ty = v - y0 as f64;
    Tap {
        idx: [y0 * wf + x0, y0 * wf + x1, y1 * wf + x0, y1 * wf + x1],
        w: [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty],
    }
}

/// Warp a `[C, h_f, w_f]` feature map onto the sphere stack, producing a
/// `[H/2, W/2, N/2, C]` volume. Cells the camera does not see are exactly zero.
pub fn warp_features(g: &mut Graph, feat: Var, grids: &Arc<SweepGrids>) -> Result<Var> {
    let fs = g.shape(feat).to_vec();
    if fs.len() != 3 || fs[1] == 0 || fs[2] == 0 {
        return Err(Error::InvalidInput(format!(
            "feature map must be [C, h, w], got {fs:?}"
        )));
    }
    let (c, hf, wf) = (fs[0], fs[1], fs[2]);
    let (rows, cols, spheres) = grids.dims;
    let cells = rows * cols * spheres;
    let plane = hf * wf;
    let taps: Vec<Option<Tap>> = (0..cells)
        .map(|cell| {
            grids.valid[cell].then(|| {
                let co = grids.coords.data();
                bilinear_tap(co[2 * cell], co[2 * cell + 1], wf, hf)
            })
        })
        .collect();
    let src = g.value(feat).data();
    let mut out = vec![0.0; cells * c];
    for (cell, tap) in taps.iter().enumerate() {
        let Some(tap) = tap else { continue };
        for ch in 0..c {
            let base = ch * plane;
            out[cell * c + ch] = (0..4).map(|t| tap.w[t] * src[base + tap.idx[t]]).sum();
        }
    }
    let shape = [rows, cols, spheres, c];
    Ok(g.custom(&[feat], Tensor::from_vec(&shape, out), move |a| {
        let gd = a.grad.data();
        let mut d = vec![0.0; c * plane];
        for (cell, tap) in taps.iter().enumerate() {
            let Some(tap) = tap else { continue };
            for ch in 0..c {
                let gv = gd[cell * c + ch];
                for t in 0..4 {
                    d[ch * plane + tap.idx[t]] += tap.w[t] * gv;
                }
            }
        }
        vec![Some(Tensor::from_vec(&[c, hf, wf], d))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::ScenePoint;

    fn small_cfg() -> SweepConfig {
        SweepConfig {
            num_spheres: 16,
            out_width: 64,
            out_height: 32,
            ..SweepConfig::default()
        }
    }

    #[test]
    fn unit_ray_cardinal_directions() {
        assert!((unit_ray(0.0, 0.0) - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!((unit_ray(0.0, PI / 2.0) - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
        assert!((unit_ray(PI / 2.0, 0.0) - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn schedule_examples() {
        let cfg = SweepConfig {
            num_spheres: 4,
            min_depth: 1.0 / 3.0,
            ..SweepConfig::default()
        };
        let s = inverse_depth_schedule(&cfg);
        assert_eq!(s.len(), 4);
        for (a, b) in s.iter().zip([0.0, 1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let cfg = SweepConfig::default();
        let s = inverse_depth_schedule(&cfg);
        assert_eq!(s[0], 0.0);
        assert!((s[1] - cfg.max_inverse_depth() / 191.0).abs() < 1e-15);
        assert_eq!(s[191], cfg.max_inverse_depth());
    }

    #[test]
    fn config_validation() {
        assert!(SweepConfig {
            num_spheres: 7,
            ..small_cfg()
        }
        .validate()
        .is_err());
        assert!(SweepConfig {
            out_width: 63,
            ..small_cfg()
        }
        .validate()
        .is_err());
        assert!(SweepConfig {
            phi_max: PI / 2.0,
            ..small_cfg()
        }
        .validate()
        .is_err());
        assert!(small_cfg().validate().is_ok());
    }

    #[test]
    fn front_axis_at_infinity_maps_to_principal_point() {
        let rig = RigCalibration::default_rig();
        // two columns put a cell center at theta = pi/2, one row at phi = 0
        let cfg = SweepConfig {
            out_width: 4,
            out_height: 2,
            ..small_cfg()
        };
        let grids = build_grids(&rig, &cfg).unwrap();
        assert!((cfg.theta(1, 2) - PI / 2.0).abs() < 1e-15);
        let front = &grids[0];
        let cell = front.cell(0, 1, 0);
        assert!(front.valid[cell]);
        let c = &front.coords.data()[2 * cell..2 * cell + 2];
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12, "{c:?}");
    }

    #[test]
    fn valid_coords_in_range_and_invalid_embedding() {
        let rig = RigCalibration::default_rig();
        let grids = build_grids(&rig, &small_cfg()).unwrap();
        for g in &grids {
            for cell in 0..g.valid.len() {
                if g.valid[cell] {
                    let c = &g.coords.data()[2 * cell..2 * cell + 2];
                    assert!(c.iter().all(|v| (-1.0..=1.0).contains(v)));
                } else {
                    let e = &g.grid_embed.data()[2 * cell..2 * cell + 2];
                    assert_eq!(e, &[INVALID_EMBED, INVALID_EMBED]);
                }
            }
        }
    }

    #[test]
    fn cells_beyond_fov_are_invalid() {
        let rig = RigCalibration::default_rig();
        let cfg = small_cfg();
        let grids = build_grids(&rig, &cfg).unwrap();
        let (rows, cols) = cfg.half_size();
        let front = &grids[0];
        for k in 0..rows {
            for j in 0..cols {
                let ray = unit_ray(cfg.theta(j, cols), cfg.phi(k, rows));
                // at infinity the incidence is the angle to the front axis
                let inc = ray.z.clamp(-1.0, 1.0).acos().to_degrees();
                if inc > 110.0 + 1e-9 {
                    let cell = front.cell(k, j, 0);
                    assert!(!front.valid[cell]);
                    assert_eq!(front.grid_embed.data()[2 * cell], -2.0);
                }
            }
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rig = RigCalibration::default_rig().with_resolution(64, 64);
        let cfg = small_cfg();
        let built = load_or_build_grids(&rig, &cfg, Some(dir.path())).unwrap();
        assert!(grid_cache_path(dir.path(), &rig, &cfg).exists());
        let cached = load_or_build_grids(&rig, &cfg, Some(dir.path())).unwrap();
        assert_eq!(built, cached);
    }

    #[test]
    fn warp_lattice_midpoint_and_invalid() {
        // 1 channel, 2x3 map: values 1, 3, 5 / 7, 9, 11
        let feat = Tensor::from_vec(&[1, 2, 3], vec![1.0, 3.0, 5.0, 7.0, 9.0, 11.0]);
        // three cells: on pixel (1, 1); midway between (0,0) and (1,0); invalid
        let coords = vec![0.0, 1.0, -0.5, -1.0, 0.0, 0.0];
        let grids = Arc::new(SweepGrids {
            dims: (1, 1, 3),
            coords: Tensor::from_vec(&[1, 1, 3, 2], coords.clone()),
            grid_embed: Tensor::from_vec(&[1, 1, 3, 2], coords),
            valid: vec![true, true, false],
            schedule: vec![],
        });
        let mut g = Graph::new();
        let f = g.constant(feat);
        let v = warp_features(&mut g, f, &grids).unwrap();
        assert_eq!(g.value(v).data(), &[9.0, 2.0, 0.0]);
    }

    #[test]
    fn warp_rejects_bad_shape() {
        let grids = Arc::new(SweepGrids {
            dims: (1, 1, 1),
            coords: Tensor::zeros(&[1, 1, 1, 2]),
            grid_embed: Tensor::zeros(&[1, 1, 1, 2]),
            valid: vec![true],
            schedule: vec![],
        });
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[4, 4]));
        assert!(warp_features(&mut g, f, &grids).is_err());
    }

    fn brute_force(rig: &RigCalibration, cfg: &SweepConfig, slot: usize) -> (Vec<bool>, Vec<f64>) {
        let cam = &rig.cameras[slot];
        let (rows, cols) = cfg.half_size();
        let (mut valid, mut coords) = (vec![], vec![]);
        for k in 0..rows {
            for j in 0..cols {
                let ray = unit_ray(cfg.theta(j, cols), cfg.phi(k, rows));
                for s in 0..cfg.half_spheres() {
                    let d = 2.0 * s as f64 * cfg.max_inverse_depth() / (cfg.num_spheres - 1) as f64;
                    let point = if d == 0.0 {
                        ScenePoint::AtInfinity(ray)
                    } else {
                        ScenePoint::Finite(rig.reference() + ray / d)
                    };
                    let p = cam.project(&point).unwrap();
                    valid.push(p.valid);
                    coords.push(2.0 * p.pixel[0] / (cam.resolution.0 - 1) as f64 - 1.0);
                    coords.push(2.0 * p.pixel[1] / (cam.resolution.1 - 1) as f64 - 1.0);
                }
            }
        }
        (valid, coords)
    }

    #[test]
    fn grids_match_per_cell_projection() {
        let rig = RigCalibration::default_rig();
        let cfg = small_cfg();
        let grids = build_grids(&rig, &cfg).unwrap();
        for (slot, g) in grids.iter().enumerate() {
            let (valid, coords) = brute_force(&rig, &cfg, slot);
            assert_eq!(g.valid, valid);
            for cell in (0..valid.len()).filter(|&c| valid[c]) {
                for a in 0..2 {
                    let diff = (g.coords.data()[2 * cell + a] - coords[2 * cell + a]).abs();
                    assert!(diff < 1e-9, "slot {slot} cell {cell}: {diff}");
                }
            }
        }
    }

    #[test]
    fn opposite_pairs_cover_every_cell() {
        let rig = RigCalibration::default_rig();
        let cfg = SweepConfig {
            num_spheres: 32,
            out_width: 128,
            out_height: 32,
            ..SweepConfig::default()
        };
        let grids = build_grids(&rig, &cfg).unwrap();
        for (a, b) in [(0, 2), (1, 3)] {
            assert!(grids[a].valid.iter().zip(&grids[b].valid).all(|(x, y)| *x || *y));
        }
    }

    #[test]
    fn warp_is_linear_and_differentiable() {
        use crate::gradcheck::{check_inputs, projection, weighted_total, DEFAULT_STEP};
        let rig = RigCalibration::default_rig().with_resolution(16, 16);
        let cfg = SweepConfig {
            out_width: 16,
            out_height: 8,
            ..small_cfg()
        };
        let grids = Arc::new(build_grids(&rig, &cfg).unwrap().remove(0));
        let (f1, f2) = (projection(&[2, 8, 8], 1), projection(&[2, 8, 8], 2));
        let warp = |t: &Tensor| {
            let mut g = Graph::new();
            let f = g.constant(t.clone());
            let v = warp_features(&mut g, f, &grids).unwrap();
            g.value(v).clone()
        };
        let combo = f1.zip_map(&f2, |a, b| 2.0 * a - 0.5 * b);
        let expect = warp(&f1).zip_map(&warp(&f2), |a, b| 2.0 * a - 0.5 * b);
        assert!(warp(&combo).max_abs_diff(&expect) < 1e-12);

        let w = projection(&[4, 8, 8, 2], 3);
        let f = |g: &mut Graph, v: &[Var]| {
            let out = warp_features(g, v[0], &grids).unwrap();
            weighted_total(g, out, w.clone())
        };
        assert!(check_inputs(&[f1], f, DEFAULT_STEP, 128)[0] < 1e-6);
    }
}
