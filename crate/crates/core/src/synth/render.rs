//! Analytic ray casting: fisheye renders and reference-point ground truth.

use nalgebra::Vector3;

use crate::camera::{FisheyeCamera, RigCalibration};
use crate::sweep::{inverse_depth_schedule, unit_ray, SweepConfig};

use super::scene::{Primitive, SceneSpec, Shape};

/// Hits closer than this along a ray are ignored.
const T_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Distance along the unit ray.
    pub t: f64,
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

fn intersect_shape(shape: &Shape, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    match shape {
        Shape::Sphere { center, radius } => {
            let c = Vector3::from(*center);
            let oc = o - c;
            let b = oc.dot(d);
            let disc = b * b - (oc.norm_squared() - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > T_EPS { -b - s } else { -b + s };
            (t > T_EPS).then(|| (t, (o + d * t - c) / *radius))
        }
        Shape::Cuboid { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut a0, mut a1) = (0, 0);
            for a in 0..3 {
                if d[a].abs() < 1e-300 {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let mut ta = (min[a] - o[a]) / d[a];
                let mut tb = (max[a] - o[a]) / d[a];
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    a0 = a;
                }
                if tb < t1 {
                    t1 = tb;
                    a1 = a;
                }
            }
            if t0 > t1 {
                return None;
            }
            let (t, axis) = if t0 > T_EPS {
                (t0, a0)
            } else if t1 > T_EPS {
                (t1, a1)
            } else {
                return None;
            };
            let mut n = Vector3::zeros();
            n[axis] = -d[axis].signum();
            Some((t, n))
        }
        Shape::Plane { normal, offset } => {
            let n = Vector3::from(*normal);
            let denom = n.dot(d);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = (offset - n.dot(o)) / denom;
            (t > T_EPS).then_some((t, n))
        }
    }
}

/// Nearest hit along the unit ray `o + t d`.
pub fn cast(primitives: &[Primitive], o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in primitives.iter().enumerate() {
        if let Some((t, normal)) = intersect_shape(&p.shape, o, d) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    normal,
                    primitive: i,
                });
            }
        }
    }
    best
}

/// Lambertian radiance at a hit, two-sided, in `[0, 1]`.
pub fn shade(scene: &SceneSpec, o: &Vector3<f64>, d: &Vector3<f64>, hit: &Hit) -> Vector3<f64> {
    let p = o + d * hit.t;
    let albedo = scene.primitives[hit.primitive].texture.color_at(&p);
    let light = Vector3::from(scene.light_dir);
    let lambert = hit.normal.dot(&light).abs();
    let k = scene.ambient + (1.0 - scene.ambient) * lambert;
    albedo.map(|c| (c * k).clamp(0.0, 1.0))
}

pub fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A rendered fisheye view. Pixels outside the field of view are black with
/// NaN depth; so are pixels whose ray hits nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct FisheyeRender {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub rgb: Vec<[u8; 3]>,
    /// Euclidean distance from the camera center to the hit, meters.
    pub depth: Vec<f64>,
}

/// Color and depth for one fisheye pixel, or `None` outside the field of view
/// or on a miss.
pub fn render_pixel(scene: &SceneSpec, cam: &FisheyeCamera, u: usize, v: usize) -> Option<([u8; 3], f64)> {
    let ray_cam = cam.unproject([u as f64, v as f64]).ok()?;
    let d = cam.rotation.transpose() * ray_cam;
    let o = cam.center();
    let hit = cast(&scene.primitives, &o, &d)?;
    let c = shade(scene, &o, &d, &hit);
    Some(([to_u8(c.x), to_u8(c.y), to_u8(c.z)], hit.t))
}

pub fn render_fisheye(scene: &SceneSpec, cam: &FisheyeCamera) -> FisheyeRender {
    let (w, h) = cam.resolution;
    let mut rgb = vec![[0u8; 3]; w * h];
    let mut depth = vec![f64::NAN; w * h];
    for v in 0..h {
        for u in 0..w {
            if let Some((c, t)) = render_pixel(scene, cam, u, v) {
                rgb[v * w + u] = c;
                depth[v * w + u] = t;
            }
        }
    }
    FisheyeRender {
        width: w,
        height: h,
        rgb,
        depth,
    }
}

/// Ground truth on the full-resolution equirectangular grid, full-index units.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    /// Index where valid, 0 elsewhere.
    pub index: Vec<f64>,
    pub mask: Vec<bool>,
    /// Hit distance from the rig reference point (NaN on a miss).
    pub distance: Vec<f64>,
}

impl GroundTruth {
    pub fn valid_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Full-index value of a hit at distance `rho`, clamped to `[0, N − 1]`.
pub fn index_of_distance(sweep: &SweepConfig, rho: f64) -> f64 {
    sweep
        .index_of_inverse_depth(1.0 / rho)
        .clamp(0.0, (sweep.num_spheres - 1) as f64)
}

pub fn gt_inverse_index(scene: &SceneSpec, rig: &RigCalibration, sweep: &SweepConfig) -> GroundTruth {
    let (w, h) = (sweep.out_width, sweep.out_height);
    let max_depth = 1.0 / inverse_depth_schedule(sweep)[1];
    let o = rig.reference();
    let mut index = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    let mut distance = vec![f64::NAN; w * h];
    for k in 0..h {
        let phi = sweep.phi(k, h);
        for j in 0..w {
            let d = unit_ray(sweep.theta(j, w), phi);
            let i = k * w + j;
            if let Some(hit) = cast(&scene.primitives, &o, &d) {
                distance[i] = hit.t;
                if hit.t <= max_depth {
                    index[i] = index_of_distance(sweep, hit.t);
                    mask[i] = true;
                }
            }
        }
    }
    GroundTruth {
        width: w,
        height: h,
        index,
        mask,
        distance,
    }
}

/// Fraction of reference rays that hit any primitive within the sweep range.
pub fn coverage(scene: &SceneSpec, rig: &RigCalibration, sweep: &SweepConfig) -> f64 {
    gt_inverse_index(scene, rig, sweep).valid_fraction()
}
