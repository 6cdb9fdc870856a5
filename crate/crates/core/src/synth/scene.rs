//! Procedural scenes made of analytic primitives.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::RigCalibration;
use crate::error::{Error, Result};
use crate::sweep::{inverse_depth_schedule, SweepConfig};

/// Extra clearance kept between any surface and any camera center, meters.
pub const CLEARANCE_MARGIN: f64 = 0.1;
/// Height of the floor plane below the rig, meters (raised clearance wins).
pub const FLOOR_DEPTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned box.
    Cuboid {
        min: [f64; 3],
        max: [f64; 3],
    },
    /// Points `x` with `normal · x = offset`; `normal` is unit length.
    Plane {
        normal: [f64; 3],
        offset: f64,
    },
}

/// Solid (3D) textures evaluated at the hit point, colors in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Checker { scale: f64, a: [f64; 3], b: [f64; 3] },
    Sinusoid { scale: f64, a: [f64; 3], b: [f64; 3] },
    Solid { color: [f64; 3] },
}

impl Texture {
    pub fn color_at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let mix = |a: &[f64; 3], b: &[f64; 3], t: f64| {
            Vector3::new(
                a[0] + t * (b[0] - a[0]),
                a[1] + t * (b[1] - a[1]),
                a[2] + t * (b[2] - a[2]),
            )
        };
        match self {
            Texture::Solid { color } => Vector3::from(*color),
            Texture::Checker { scale, a, b } => {
                let q = p / *scale;
                let parity = (q.x.floor() + q.y.floor() + q.z.floor()) as i64;
                if parity.rem_euclid(2) == 0 {
                    Vector3::from(*a)
                } else {
                    Vector3::from(*b)
                }
            }
            Texture::Sinusoid { scale, a, b } => {
                let q = p * (2.0 * PI / *scale);
                let t = 0.5 + 0.5 * (q.x.sin() * q.y.cos() + q.z.sin()) / 2.0;
                mix(a, b, t)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Easy,
    Medium,
    Hard,
}

impl Preset {
    /// Inclusive range of object count (floor and background not counted).
    pub fn object_range(self) -> (usize, usize) {
        match self {
            Preset::Easy => (4, 8),
            Preset::Medium => (8, 14),
            Preset::Hard => (14, 20),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Easy => "easy",
            Preset::Medium => "medium",
            Preset::Hard => "hard",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Preset::Easy, Preset::Medium, Preset::Hard]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (easy|medium|hard)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub preset: Preset,
    /// Objects first, then the floor, then the background sphere.
    pub primitives: Vec<Primitive>,
    /// Unit vector towards the light.
    pub light_dir: [f64; 3],
    pub ambient: f64,
}

impl SceneSpec {
    pub fn empty() -> Self {
        SceneSpec {
            seed: 0,
            preset: Preset::Easy,
            primitives: vec![],
            light_dir: [0.0, 1.0, 0.0],
            ambient: 0.3,
        }
    }
}

/// Radius of the background sphere: just inside the first nonzero sweep
/// sphere, so background pixels carry a valid index near 0.
pub fn background_radius(sweep: &SweepConfig) -> f64 {
    0.9 / inverse_depth_schedule(sweep)[1]
}

/// Distance from `p` to the surface of `shape` (0 inside solids).
pub fn surface_distance(shape: &Shape, p: &Vector3<f64>) -> f64 {
    match shape {
        Shape::Sphere { center, radius } => ((p - Vector3::from(*center)).norm() - radius).max(0.0),
        Shape::Cuboid { min, max } => {
            let mut d2 = 0.0;
            for a in 0..3 {
                let e = (min[a] - p[a]).max(0.0).max(p[a] - max[a]);
                d2 += e * e;
            }
            d2.sqrt()
        }
        Shape::Plane { normal, offset } => (Vector3::from(*normal).dot(p) - offset).abs(),
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ]
}

/// Two colors far enough apart for a visible pattern.
fn color_pair(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    let a = random_color(rng);
    let b = [1.0 - a[0], 1.0 - a[1], 1.0 - a[2]];
    let t = rng.gen_range(0.6..1.0);
    (
        a,
        [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ],
    )
}

fn random_texture(rng: &mut ChaCha8Rng, size: f64) -> Texture {
    let (a, b) = color_pair(rng);
    let scale = size * rng.gen_range(0.3..0.8);
    match rng.gen_range(0..10) {
        0..=4 => Texture::Checker { scale, a, b },
        5..=8 => Texture::Sinusoid {
            scale: 2.0 * scale,
            a,
            b,
        },
        _ => Texture::Solid { color: a },
    }
}

/// Deterministic scene for `seed`. Objects are placed with centers at
/// inverse-uniform distances in `[1.5 min_depth, 0.8 R_bg]` and rejected if any
/// surface comes closer than `min_depth + margin` to a camera center or the
/// rig reference.
pub fn generate_scene(seed: u64, preset: Preset, rig: &RigCalibration, sweep: &SweepConfig) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r_bg = background_radius(sweep);
    let reference = rig.reference();
    let mut keep_out: Vec<Vector3<f64>> = rig.cameras.iter().map(|c| c.center()).collect();
    keep_out.push(reference);
    let clearance = sweep.min_depth + CLEARANCE_MARGIN;
    let (near, far) = (1.5 * sweep.min_depth, 0.8 * r_bg);

    let (lo, hi) = preset.object_range();
    let count = rng.gen_range(lo..=hi);
    let mut primitives = Vec::with_capacity(count + 2);
    while primitives.len() < count {
        let inv = rng.gen_range(1.0 / far..1.0 / near);
        let dist = 1.0 / inv;
        let theta = rng.gen_range(-PI..PI);
        let phi = rng.gen_range(0.9 * sweep.phi_min..0.9 * sweep.phi_max);
        let dir = Vector3::new(phi.cos() * theta.cos(), phi.sin(), phi.cos() * theta.sin());
        let center = reference + dir * dist;
        let size = dist * rng.gen_range(0.08..0.2);
        let shape = if rng.gen_bool(0.5) {
            Shape::Sphere {
                center: center.into(),
                radius: size,
            }
        } else {
            let half = Vector3::new(
                size * rng.gen_range(0.5..1.2),
                size * rng.gen_range(0.5..1.2),
                size * rng.gen_range(0.5..1.2),
            );
            Shape::Cuboid {
                min: (center - half).into(),
                max: (center + half).into(),
            }
        };
        let texture = random_texture(&mut rng, size);
        if keep_out.iter().all(|p| surface_distance(&shape, p) >= clearance) {
            primitives.push(Primitive { shape, texture });
        }
    }

    let (a, b) = color_pair(&mut rng);
    primitives.push(Primitive {
        shape: Shape::Plane {
            normal: [0.0, 1.0, 0.0],
            offset: reference.y - FLOOR_DEPTH.max(clearance + CLEARANCE_MARGIN),
        },
        texture: Texture::Checker {
            scale: rng.gen_range(0.3..0.6),
            a,
            b,
        },
    });
    let (a, b) = color_pair(&mut rng);
    primitives.push(Primitive {
        shape: Shape::Sphere {
            center: reference.into(),
            radius: r_bg,
        },
        texture: Texture::Sinusoid {
            scale: r_bg * rng.gen_range(0.15..0.3),
            a,
            b,
        },
    });

    let el: f64 = rng.gen_range(0.3..1.2);
    let az: f64 = rng.gen_range(-PI..PI);
    SceneSpec {
        seed,
        preset,
        primitives,
        light_dir: [el.cos() * az.cos(), el.sin(), el.cos() * az.sin()],
        ambient: rng.gen_range(0.25..0.45),
    }
}
