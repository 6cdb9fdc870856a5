//! Single-channel portable float maps, little-endian (scale -1.0).
//! Rows are stored bottom-to-top as the format requires.

use std::path::Path;

use crate::error::{Error, Result};

/// A `height × width` float map, top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(width * height, data.len());
        FloatMap { width, height, data }
    }

    pub fn from_f64(width: usize, height: usize, data: &[f64]) -> Self {
        Self::new(width, height, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn encode_pfm(map: &FloatMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    for row in (0..map.height).rev() {
        for v in &map.data[row * map.width..(row + 1) * map.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: &Path, map: &FloatMap) -> Result<()> {
    std::fs::write(path, encode_pfm(map)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<FloatMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<FloatMap> {
    let fail = |m: &str| Error::format(path, m.to_string());
    // three whitespace-terminated header lines
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 3 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail("truncated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| fail("bad header"))?;
        fields.push(line.trim().to_string());
        pos += end + 1;
    }
    if fields[0] != "Pf" {
        return Err(fail("only single-channel `Pf` maps are supported"));
    }
    let dims: Vec<usize> = fields[1]
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| fail("bad dimensions")))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(fail("bad dimensions"));
    }
    let scale: f64 = fields[2].parse().map_err(|_| fail("bad scale"))?;
    let little = scale < 0.0;
    let (width, height) = (dims[0], dims[1]);
    let body = &bytes[pos..];
    if body.len() != width * height * 4 {
        return Err(fail("data length does not match dimensions"));
    }
    let mut data = vec![0f32; width * height];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (file_row, col) = (i / width, i % width);
        data[(height - 1 - file_row) * width + col] = v;
    }
    Ok(FloatMap { width, height, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_row_order() {
        let map = FloatMap::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = encode_pfm(&map);
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // first stored row is the bottom one
        let body = &bytes[b"Pf\n3 2\n-1.0\n".len()..];
        assert_eq!(f32::from_le_bytes(body[..4].try_into().unwrap()), 4.0);
        assert_eq!(decode_pfm(&bytes, Path::new("m")).unwrap(), map);
    }

    #[test]
    fn rejects_color_maps() {
        assert!(decode_pfm(b"PF\n1 1\n-1.0\n000000000000", Path::new("m")).is_err());
    }
}
