//! Equidistant fisheye cameras and the four-camera rig.
//!
//! The rig frame has `y` pointing up. The four cameras face outward along
//! `+z` (front), `+x` (right), `-z` (back) and `-x` (left). Each camera frame
//! has its optical axis along `+z`, `x` to the image right and `y` down.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera names in rig order.
pub const CAMERA_NAMES: [&str; 4] = ["front", "right", "back", "left"];

/// Nominal outward optical axis for each rig slot, in the rig frame.
pub fn nominal_axis(slot: usize) -> Vector3<f64> {
    match slot {
        0 => Vector3::z(),
        1 => Vector3::x(),
        2 => -Vector3::z(),
        3 => -Vector3::x(),
        _ => panic!("rig has four cameras"),
    }
}

/// A point handed to [`FisheyeCamera::project`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScenePoint {
    /// Position in meters, rig frame.
    Finite(Vector3<f64>),
    /// Direction at infinity, rig frame. Translation does not apply.
    AtInfinity(Vector3<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisheyeCamera {
    pub name: String,
    /// Pixels per radian of incidence.
    pub focal: f64,
    pub principal_point: [f64; 2],
    /// Full field of view in degrees.
    pub fov_deg: f64,
    /// (width, height) in pixels.
    pub resolution: (usize, usize),
    /// Rig-to-camera rotation: `p_cam = rotation * p_rig + translation`.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl FisheyeCamera {
    pub fn half_fov(&self) -> f64 {
        (self.fov_deg / 2.0).to_radians()
    }

    /// Camera center in the rig frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis in the rig frame.
    pub fn axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// Project a rig-frame point.
    pub fn project(&self, point: &ScenePoint) -> Result<Projection> {
        let p_cam = match point {
            ScenePoint::Finite(p) => {
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidInput(format!("non-finite point {p:?}")));
                }
                self.rotation * p + self.translation
            }
            ScenePoint::AtInfinity(d) => {
                if !d.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidInput(format!("non-finite direction {d:?}")));
                }
                self.rotation * d
            }
        };
        Ok(self.project_camera_frame(&p_cam))
    }

    /// Project a point (or direction) already expressed in the camera frame.
    /// Only the direction of `p` matters for the equidistant model.
    pub fn project_camera_frame(&self, p: &Vector3<f64>) -> Projection {
        let r_xy = p.x.hypot(p.y);
        if r_xy == 0.0 && p.z == 0.0 {
            // point sits on the camera center
            return Projection {
                pixel: self.principal_point,
                valid: false,
            };
        }
        let incidence = r_xy.atan2(p.z);
        let rho = self.focal * incidence;
        let pixel = if r_xy > 0.0 {
            [
                self.principal_point[0] + rho * p.x / r_xy,
                self.principal_point[1] + rho * p.y / r_xy,
            ]
        } else {
            self.principal_point
        };
        let (w, h) = self.resolution;
        let inside = pixel[0] >= 0.0 && pixel[0] <= (w - 1) as f64 && pixel[1] >= 0.0 && pixel[1] <= (h - 1) as f64;
        Projection {
            pixel,
            valid: incidence <= self.half_fov() + 1e-12 && inside,
        }
    }

    /// Unit ray in the camera frame through `pixel`.
    pub fn unproject(&self, pixel: [f64; 2]) -> Result<Vector3<f64>> {
        let (w, h) = self.resolution;
        if !(pixel[0] >= 0.0 && pixel[0] <= (w - 1) as f64 && pixel[1] >= 0.0 && pixel[1] <= (h - 1) as f64) {
            return Err(Error::InvalidInput(format!("pixel {pixel:?} outside {w}x{h} image")));
        }
        let dx = pixel[0] - self.principal_point[0];
        let dy = pixel[1] - self.principal_point[1];
        let r = dx.hypot(dy);
        let incidence = r / self.focal;
        if incidence > self.half_fov() + 1e-12 {
            return Err(Error::InvalidRay {
                incidence_deg: incidence.to_degrees(),
                half_fov_deg: self.fov_deg / 2.0,
            });
        }
        if r == 0.0 {
            return Ok(Vector3::z());
        }
        let s = incidence.sin();
        Ok(Vector3::new(s * dx / r, s * dy / r, incidence.cos()))
    }

    fn validate(&self, slot: usize) -> Result<()> {
        let field = |f: &str| format!("cameras[{slot}].{f}");
        let bad = |f: &str, reason: String| Error::Calibration {
            field: field(f),
            reason,
        };
        if self.name != CAMERA_NAMES[slot] {
            return Err(bad(
                "name",
                format!("expected `{}`, got `{}`", CAMERA_NAMES[slot], self.name),
            ));
        }
        if !(self.fov_deg > 180.0 && self.fov_deg < 360.0) {
            return Err(bad("fov_deg", format!("{} not in (180, 360)", self.fov_deg)));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(bad("focal_px_per_rad", format!("{} must be positive", self.focal)));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(bad("resolution", "must be positive".into()));
        }
        if !self.principal_point.iter().all(|v| v.is_finite()) {
            return Err(bad("principal_point", "must be finite".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(bad("translation_m", "must be finite".into()));
        }
        let ortho = (self.rotation * self.rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        if !(ortho <= 1e-9) {
            return Err(bad(
                "rotation_row_major",
                format!("not orthonormal (max |R R^T - I| = {ortho:.3e})"),
            ));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(bad("rotation_row_major", format!("determinant {det} != +1")));
        }
        // Pairing front/back and right/left assumes roughly outward-facing cameras.
        let cos = self.axis().dot(&nominal_axis(slot));
        if cos < std::f64::consts::FRAC_1_SQRT_2 {
            return Err(bad(
                "rotation_row_major",
                format!(
                    "optical axis {:?} is more than 45 deg away from the {} direction",
                    self.axis().as_slice(),
                    CAMERA_NAMES[slot]
                ),
            ));
        }
        Ok(())
    }
}

/// Four fisheye cameras in the order front, right, back, left.
#[derive(Clone, Debug, PartialEq)]
pub struct RigCalibration {
    pub baseline: f64,
    pub cameras: Vec<FisheyeCamera>,
}

impl RigCalibration {
    /// Square rig with cameras at the edge midpoints of a `baseline`-sided square,
    /// facing outward. The equidistant image circle of half-angle `fov/2` is
    /// inscribed in the image with a 1% margin.
    pub fn square(baseline: f64, fov_deg: f64, width: usize, height: usize) -> Self {
        let half = baseline / 2.0;
        let half_fov = (fov_deg / 2.0).to_radians();
        let radius = 0.99 * ((width.min(height) - 1) as f64) / 2.0;
        let cameras = (0..4)
            .map(|slot| {
                let axis = nominal_axis(slot);
                let down = -Vector3::y();
                let right = down.cross(&axis);
                let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), axis.transpose()]);
                let center = axis * half;
                FisheyeCamera {
                    name: CAMERA_NAMES[slot].to_string(),
                    focal: radius / half_fov,
                    principal_point: [(width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0],
                    fov_deg,
                    resolution: (width, height),
                    rotation,
                    translation: -(rotation * center),
                }
            })
            .collect();
        RigCalibration { baseline, cameras }
    }

    /// The bundled rig: 0.4 m square, 220° field of view, 640×640 images.
    pub fn default_rig() -> Self {
        Self::square(0.4, 220.0, 640, 640)
    }

    /// Same geometry with every camera resampled to `width × height`.
    pub fn with_resolution(&self, width: usize, height: usize) -> Self {
        let mut out = self.clone();
        for cam in &mut out.cameras {
            let sx = (width - 1) as f64 / (cam.resolution.0 - 1) as f64;
            let sy = (height - 1) as f64 / (cam.resolution.1 - 1) as f64;
            cam.focal *= sx.min(sy);
            cam.principal_point = [cam.principal_point[0] * sx, cam.principal_point[1] * sy];
            cam.resolution = (width, height);
        }
        out
    }

    /// Prediction origin: centroid of the camera centers.
    pub fn reference(&self) -> Vector3<f64> {
        self.cameras.iter().map(|c| c.center()).sum::<Vector3<f64>>() / self.cameras.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() != 4 {
            return Err(Error::Calibration {
                field: "cameras".into(),
                reason: format!("expected 4 cameras, got {}", self.cameras.len()),
            });
        }
        if !(self.baseline.is_finite() && self.baseline > 0.0) {
            return Err(Error::Calibration {
                field: "baseline_m".into(),
                reason: format!("{} must be positive", self.baseline),
            });
        }
        for (slot, cam) in self.cameras.iter().enumerate() {
            cam.validate(slot)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RigFile = serde_json::from_str(text).map_err(|e| Error::Calibration {
            field: "<file>".into(),
            reason: e.to_string(),
        })?;
        let rig = file.into_rig()?;
        rig.validate()?;
        Ok(rig)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RigFile::from_rig(self)).expect("rig serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Read and validate a calibration file.
pub fn load_rig(path: &Path) -> Result<RigCalibration> {
    RigCalibration::load(path)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigFile {
    baseline_m: f64,
    cameras: Vec<CameraFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    name: String,
    focal_px_per_rad: f64,
    principal_point: [f64; 2],
    fov_deg: f64,
    resolution: [usize; 2],
    rotation_row_major: Vec<f64>,
    translation_m: Vec<f64>,
}

impl RigFile {
    fn into_rig(self) -> Result<RigCalibration> {
        let cameras = self
            .cameras
            .into_iter()
            .enumerate()
            .map(|(slot, c)| {
                if c.rotation_row_major.len() != 9 {
                    return Err(Error::Calibration {
                        field: format!("cameras[{slot}].rotation_row_major"),
                        reason: format!("expected 9 values, got {}", c.rotation_row_major.len()),
                    });
                }
                if c.translation_m.len() != 3 {
                    return Err(Error::Calibration {
                        field: format!("cameras[{slot}].translation_m"),
                        reason: format!("expected 3 values, got {}", c.translation_m.len()),
                    });
                }
                Ok(FisheyeCamera {
                    name: c.name,
                    focal: c.focal_px_per_rad,
                    principal_point: c.principal_point,
                    fov_deg: c.fov_deg,
                    resolution: (c.resolution[0], c.resolution[1]),
                    rotation: Matrix3::from_row_slice(&c.rotation_row_major),
                    translation: Vector3::from_column_slice(&c.translation_m),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RigCalibration {
            baseline: self.baseline_m,
            cameras,
        })
    }

    fn from_rig(rig: &RigCalibration) -> Self {
        RigFile {
            baseline_m: rig.baseline,
            cameras: rig
                .cameras
                .iter()
                .map(|c| CameraFile {
                    name: c.name.clone(),
                    focal_px_per_rad: c.focal,
                    principal_point: c.principal_point,
                    fov_deg: c.fov_deg,
                    resolution: [c.resolution.0, c.resolution.1],
                    rotation_row_major: c.rotation.transpose().as_slice().to_vec(),
                    translation_m: c.translation.as_slice().to_vec(),
                })
                .collect(),
        }
    }
}
