//! Correlation volume, its depth pyramid, lookups around the current
//! estimate, and context sampling.
//!
//! Estimates `d` live on the half-index axis `[0, N/2 − 1]`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PYRAMID_LEVELS: usize = 4;
pub const LOOKUP_RADIUS: usize = 4;

/// Channels produced by [`lookup`].
pub fn lookup_channels(radius: usize) -> usize {
    PYRAMID_LEVELS * (2 * radius + 1)
}

/// Per-cell dot product over channels: `[H, W, D, C] × [H, W, D, C] → [H, W, D]`.
pub fn correlation_volume(g: &mut Graph, s_ref: Var, s_tgt: Var) -> Result<Var> {
    let shape = g.shape(s_ref).to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidInput(format!(
            "correlation needs 4-D volumes, got {shape:?}"
        )));
    }
    if g.shape(s_tgt) != shape.as_slice() {
        return Err(Error::shape("correlation_volume", &shape, g.shape(s_tgt)));
    }
    let c = shape[3];
    let (a, b) = (g.value(s_ref).data(), g.value(s_tgt).data());
    let out: Vec<f64> = a
        .chunks_exact(c)
        .zip(b.chunks_exact(c))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
        .collect();
    let out_shape = shape[..3].to_vec();
    Ok(
        g.custom(&[s_ref, s_tgt], Tensor::from_vec(&out_shape, out), move |args| {
            let go = args.grad.data();
            let scaled = |other: &Tensor| {
                let mut d = vec![0.0; other.len()];
                for (cell, &gc) in go.iter().enumerate() {
                    for ch in 0..c {
                        d[cell * c + ch] = gc * other.data()[cell * c + ch];
                    }
                }
                Tensor::from_vec(other.shape(), d)
            };
            vec![
                args.needs[0].then(|| scaled(args.inputs[1])),
                args.needs[1].then(|| scaled(args.inputs[0])),
            ]
        }),
    )
}

/// Mean over non-overlapping pairs along the last axis.
pub fn pool_last(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n = *shape.last().unwrap_or(&0);
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("cannot halve a last axis of {n}")));
    }
    let out: Vec<f64> = g.value(x).data().chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
    let mut out_shape = shape.clone();
    *out_shape.last_mut().unwrap() = n / 2;
    Ok(g.custom(&[x], Tensor::from_vec(&out_shape, out), move |a| {
        let mut d = Vec::with_capacity(2 * a.grad.len());
        for &v in a.grad.data() {
            d.push(0.5 * v);
            d.push(0.5 * v);
        }
        vec![Some(Tensor::from_vec(&shape, d))]
    }))
}

/// Four levels of correlation, each half as deep as the previous.
#[derive(Clone, Debug)]
pub struct CorrelationPyramid {
    pub levels: Vec<Var>,
}

impl CorrelationPyramid {
    pub fn extents(&self, g: &Graph) -> Vec<usize> {
        self.levels.iter().map(|&v| g.value(v).last_dim()).collect()
    }
}

pub fn build_pyramid(g: &mut Graph, corr: Var) -> Result<CorrelationPyramid> {
    let n = g.value(corr).last_dim();
    if n == 0 || !n.is_multiple_of(1 << (PYRAMID_LEVELS - 1)) {
        return Err(Error::InvalidInput(format!(
            "correlation depth {n} is not divisible by {}",
            1 << (PYRAMID_LEVELS - 1)
        )));
    }
    let mut levels = vec![corr];
    for _ in 1..PYRAMID_LEVELS {
        let next = pool_last(g, *levels.last().unwrap())?;
        levels.push(next);
    }
    Ok(CorrelationPyramid { levels })
}

/// Linear taps at a fractional position `p`. Returns `(i0, t)` with weights `(1 − t)` at `i0` and `t` at `i0 + 1`.
fn taps(p: f64) -> (isize, f64) {
    let f = p.floor();
    (f as isize, p - f)
}

fn at(row: &[f64], i: isize) -> f64 {
    if i >= 0 && (i as usize) < row.len() {
        row[i as usize]
    } else {
        0.0
    }
}

/// Correlation features around `d`: `[4·(2r+1), H, W]`, channel
/// `level·(2r+1) + (k + r)` samples level `level` at `d / 2^level + k`.
/// Samples outside a level read as zero.
pub fn lookup(g: &mut Graph, pyramid: &CorrelationPyramid, d: Var, radius: usize) -> Result<Var> {
    let first = g.shape(pyramid.levels[0]).to_vec();
    let (h, w) = (first[0], first[1]);
    if g.shape(d) != [h, w] {
        return Err(Error::shape("lookup", &[h, w], g.shape(d)));
    }
    let taps_per_level = 2 * radius + 1;
    let channels = pyramid.levels.len() * taps_per_level;
    let plane = h * w;
    let mut out = vec![0.0; channels * plane];
    let dv = g.value(d).data().to_vec();
    for (lvl, &var) in pyramid.levels.iter().enumerate() {
        let data = g.value(var).data();
        let n = g.value(var).last_dim();
        let scale = 1.0 / (1usize << lvl) as f64;
        for cell in 0..plane {
            let row = &data[cell * n..(cell + 1) * n];
            for k in 0..taps_per_level {
                let (i0, t) = taps(dv[cell] * scale + k as f64 - radius as f64);
                out[(lvl * taps_per_level + k) * plane + cell] = (1.0 - t) * at(row, i0) + t * at(row, i0 + 1);
            }
        }
    }
    let mut parents = pyramid.levels.clone();
    parents.push(d);
    let nl = pyramid.levels.len();
    Ok(g.custom(&parents, Tensor::from_vec(&[channels, h, w], out), move |a| {
        let go = a.grad.data();
        let dv = a.inputs[nl].data();
        let mut gd = vec![0.0; plane];
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nl + 1);
        for lvl in 0..nl {
            let level = a.inputs[lvl];
            let n = level.last_dim();
            let data = level.data();
            let scale = 1.0 / (1usize << lvl) as f64;
            let mut gl = a.needs[lvl].then(|| vec![0.0; level.len()]);
            for cell in 0..plane {
                let row = &data[cell * n..(cell + 1) * n];
                for k in 0..taps_per_level {
                    let gv = go[(lvl * taps_per_level + k) * plane + cell];
                    if gv == 0.0 {
                        continue;
                    }
                    let (i0, t) = taps(dv[cell] * scale + k as f64 - radius as f64);
                    gd[cell] += gv * scale * (at(row, i0 + 1) - at(row, i0));
                    if let Some(gl) = gl.as_mut() {
                        for (i, wt) in [(i0, 1.0 - t), (i0 + 1, t)] {
                            if i >= 0 && (i as usize) < n {
                                gl[cell * n + i as usize] += gv * wt;
                            }
                        }
                    }
                }
            }
            grads.push(gl.map(|v| Tensor::from_vec(level.shape(), v)));
        }
        grads.push(a.needs[nl].then(|| Tensor::from_vec(&[h, w], gd)));
        grads
    }))
}

/// Context at the current estimate: `ctx: [H, W, D, C]`, `d: [H, W]` →
/// `[C, H, W]`, linear along depth with `d` clamped to `[0, D − 1]`.
pub fn sample_context(g: &mut Graph, ctx: Var, d: Var) -> Result<Var> {
    let shape = g.shape(ctx).to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidInput(format!("context must be 4-D, got {shape:?}")));
    }
    let (h, w, n, c) = (shape[0], shape[1], shape[2], shape[3]);
    if g.shape(d) != [h, w] {
        return Err(Error::shape("sample_context", &[h, w], g.shape(d)));
    }
    let plane = h * w;
    // (lower index, weight of upper, derivative passes through)
    let taps: Vec<(usize, f64, bool)> = g
        .value(d)
        .data()
        .iter()
        .map(|&p| {
            let hi = (n - 1) as f64;
            let inside = p > 0.0 && p < hi;
            let q = p.clamp(0.0, hi);
            let i0 = (q.floor() as usize).min(n.saturating_sub(2));
            (i0, q - i0 as f64, inside)
        })
        .collect();
    let cv = g.value(ctx).data();
    let mut out = vec![0.0; c * plane];
    for (cell, &(i0, t, _)) in taps.iter().enumerate() {
        let base = cell * n;
        for ch in 0..c {
            let lo = cv[(base + i0) * c + ch];
            let up = if n > 1 { cv[(base + i0 + 1) * c + ch] } else { lo };
            out[ch * plane + cell] = (1.0 - t) * lo + t * up;
        }
    }
    Ok(g.custom(&[ctx, d], Tensor::from_vec(&[c, h, w], out), move |a| {
        let go = a.grad.data();
        let cv = a.inputs[0].data();
        let gctx = a.needs[0].then(|| {
            let mut gc = vec![0.0; cv.len()];
            for (cell, &(i0, t, _)) in taps.iter().enumerate() {
                let base = cell * n;
                for ch in 0..c {
                    let gv = go[ch * plane + cell];
                    gc[(base + i0) * c + ch] += (1.0 - t) * gv;
                    if n > 1 {
                        gc[(base + i0 + 1) * c + ch] += t * gv;
                    }
                }
            }
            Tensor::from_vec(a.inputs[0].shape(), gc)
        });
        let gd = a.needs[1].then(|| {
            let mut gd = vec![0.0; plane];
            for (cell, &(i0, _, inside)) in taps.iter().enumerate() {
                if !inside || n < 2 {
                    continue;
                }
                let base = cell * n;
                for ch in 0..c {
                    let slope = cv[(base + i0 + 1) * c + ch] - cv[(base + i0) * c + ch];
                    gd[cell] += go[ch * plane + cell] * slope;
                }
            }
            Tensor::from_vec(&[h, w], gd)
        });
        vec![gctx, gd]
    }))
}
