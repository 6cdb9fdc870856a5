//! Fixed color scales for depth panoramas and error maps.
//!
//! Both use the same five-stop ramp (blue, cyan, green, yellow, red), linear
//! between stops. Black is reserved for invalid pixels and never produced by
//! the ramp.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

/// Error maps saturate here, matching the widest outlier band of the metrics.
pub const ERROR_SATURATION: f64 = 5.0;

const STOPS: [[f64; 3]; 5] = [
    [0.0, 64.0, 255.0],
    [0.0, 200.0, 255.0],
    [0.0, 220.0, 0.0],
    [255.0, 220.0, 0.0],
    [255.0, 0.0, 0.0],
];

/// Map `t` (clamped to `[0, 1]`) through the ramp.
pub fn ramp(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 1.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    }
    out
}

/// `|pred − gt|` colored on `[0, ERROR_SATURATION]`; invalid pixels black.
pub fn render_error_map(pred: &[f64], gt: &[f64], mask: &[bool], width: usize, height: usize) -> Result<RgbImage> {
    let n = width * height;
    if pred.len() != n || gt.len() != n || mask.len() != n {
        return Err(Error::InvalidInput(format!(
            "error map inputs must all have {n} pixels ({} / {} / {})",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let mut img = RgbImage::new(width as u32, height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        if mask[i] {
            px.0 = ramp((pred[i] - gt[i]).abs() / ERROR_SATURATION);
        }
    }
    Ok(img)
}

/// Index map colored on `[0, max_index]`.
pub fn render_depth_map(index: &[f64], max_index: f64, width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::new(width as u32, height as u32);
    for (px, &v) in img.pixels_mut().zip(index) {
        px.0 = ramp(v / max_index);
    }
    img
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::format(path, format!("png encode: {e}")))
}

pub fn save_gray(path: &Path, img: &GrayImage) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::format(path, format!("png encode: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_error_is_uniform_and_not_black() {
        let img = render_error_map(&[1.0, 2.0], &[1.0, 2.0], &[true, true], 2, 1).unwrap();
        assert_eq!(img.get_pixel(0, 0), img.get_pixel(1, 0));
        assert_ne!(img.get_pixel(0, 0).0, [0, 0, 0]);
    }

    #[test]
    fn saturates_at_five() {
        let img = render_error_map(&[5.0, 50.0], &[0.0, 0.0], &[true, true], 2, 1).unwrap();
        assert_eq!(img.get_pixel(0, 0), img.get_pixel(1, 0));
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
    }

    #[test]
    fn invalid_black_and_dimensions() {
        let img = render_error_map(&[0.0; 6], &[1.0; 6], &[false; 6], 3, 2).unwrap();
        assert_eq!(img.dimensions(), (3, 2));
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
        assert!(render_error_map(&[0.0; 5], &[1.0; 6], &[false; 6], 3, 2).is_err());
    }
}
