//! Point clouds from equirectangular index maps.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sweep::{unit_ray, SweepConfig};

/// Default lowest index exported; smaller indices are too far to be useful.
pub const DEFAULT_INDEX_FLOOR: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Back-project a full-resolution `height × width` index map (full-index units)
/// into points relative to the rig reference. Pixels with `mask == false` or an
/// index below `index_floor` are skipped.
pub fn export_pointcloud(
    index: &[f64],
    mask: Option<&[bool]>,
    cfg: &SweepConfig,
    rgb: Option<&[[u8; 3]]>,
    index_floor: f64,
) -> Result<PointCloud> {
    let (w, h) = (cfg.out_width, cfg.out_height);
    if index.len() != w * h {
        return Err(Error::InvalidInput(format!(
            "index map has {} pixels, expected {w}x{h}",
            index.len()
        )));
    }
    if rgb.is_some_and(|c| c.len() != w * h) || mask.is_some_and(|m| m.len() != w * h) {
        return Err(Error::InvalidInput("color/mask size mismatch".into()));
    }
    let mut points = Vec::new();
    let mut colors = rgb.map(|_| Vec::new());
    for k in 0..h {
        let phi = cfg.phi(k, h);
        for j in 0..w {
            let i = k * w + j;
            let idx = index[i];
            if mask.is_some_and(|m| !m[i]) || !idx.is_finite() || idx < index_floor {
                continue;
            }
            let rho = 1.0 / cfg.inverse_depth_of_index(idx);
            let p = unit_ray(cfg.theta(j, w), phi) * rho;
            points.push([p.x, p.y, p.z]);
            if let (Some(out), Some(src)) = (colors.as_mut(), rgb) {
                out.push(src[i]);
            }
        }
    }
    if points.is_empty() {
        log::warn!("point cloud is empty: no pixel above index floor {index_floor}");
    }
    Ok(PointCloud { points, colors })
}

pub fn encode_ply(cloud: &PointCloud, ascii: bool) -> Vec<u8> {
    let format = if ascii { "ascii 1.0" } else { "binary_little_endian 1.0" };
    let mut out = format!(
        "ply\nformat {format}\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        cloud.len()
    )
    .into_bytes();
    if cloud.colors.is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.extend_from_slice(b"end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let color = cloud.colors.as_ref().map(|c| c[i]);
        if ascii {
            let mut line = format!("{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
            if let Some(c) = color {
                line += &format!(" {} {} {}", c[0], c[1], c[2]);
            }
            line.push('\n');
            out.extend_from_slice(line.as_bytes());
        } else {
            for v in p {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            if let Some(c) = color {
                out.extend_from_slice(&c);
            }
        }
    }
    out
}

pub fn write_ply(path: &Path, cloud: &PointCloud, ascii: bool) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_ply(cloud, ascii)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    #[test]
    fn single_pixel_on_x_axis() {
        // pixel (0, 0) is centered at theta = 0, phi = 0
        let cfg = SweepConfig {
            num_spheres: 32,
            min_depth: 0.5,
            out_width: 2,
            out_height: 2,
            theta_min: -0.2,
            theta_max: 0.6,
            phi_min: -0.2,
            phi_max: 0.6,
        };
        // rho = 2 m
        let mut index = vec![0.0; 4];
        index[0] = cfg.index_of_inverse_depth(0.5);
        let cloud = export_pointcloud(&index, None, &cfg, None, DEFAULT_INDEX_FLOOR).unwrap();
        assert_eq!(cloud.len(), 1);
        for (a, b) in cloud.points[0].iter().zip([2.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-12, "{:?}", cloud.points[0]);
        }
    }

    #[test]
    fn empty_cloud_still_has_header() {
        let cfg = SweepConfig {
            out_width: 4,
            out_height: 2,
            ..SweepConfig::default()
        };
        let cloud = export_pointcloud(&[0.0; 8], None, &cfg, None, 0.5).unwrap();
        assert!(cloud.is_empty());
        let text = String::from_utf8(encode_ply(&cloud, true)).unwrap();
        assert!(text.contains("element vertex 0"));
        assert!(text.ends_with("end_header\n"));
    }

    #[test]
    fn binary_layout() {
        let cloud = PointCloud {
            points: vec![[1.0, 2.0, 3.0]],
            colors: Some(vec![[1, 2, 3]]),
        };
        let bytes = encode_ply(&cloud, false);
        let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(bytes.len() - header_end, 12 + 3);
    }
}
