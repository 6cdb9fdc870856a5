//! 2D convolution (per-tap GEMM) and instance normalization over `[C, H, W]` maps.

use super::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zeros outside the map on both axes.
    Zero,
    /// Circular along the width axis (panorama azimuth), zeros along the height axis.
    WrapWidth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Stride 1, output the same size as the input for odd kernel `k`.
    pub fn same(k: usize, padding: Padding) -> Self {
        ConvSpec {
            stride: 1,
            pad: k / 2,
            padding,
        }
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    /// Input column for tap `kx` at output column `ox`, per `kx`, or -1 when the
    /// tap lands in zero padding.
    fn column_map(&self) -> Vec<Vec<isize>> {
        (0..self.k)
            .map(|kx| {
                (0..self.wo)
                    .map(|ox| {
                        let ix = (ox * self.spec.stride + kx) as isize - self.spec.pad as isize;
                        if (0..self.w as isize).contains(&ix) {
                            ix
                        } else {
                            match self.spec.padding {
                                Padding::Zero => -1,
                                Padding::WrapWidth => ix.rem_euclid(self.w as isize),
                            }
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Input row for tap `ky` at output row `oy`, or `None` in padding.
    #[inline]
    fn source_row(&self, ky: usize, oy: usize) -> Option<usize> {
        let iy = (oy * self.spec.stride + ky) as isize - self.spec.pad as isize;
        (0..self.h as isize).contains(&iy).then_some(iy as usize)
    }

    /// `[Cin, Ho·Wo]` view of `x` as seen by tap `(ky, ·)` with column map `xm`.
    fn gather(&self, x: &[f64], ky: usize, xm: &[isize], out: &mut [f64]) {
        let (plane, p) = (self.h * self.w, self.ho * self.wo);
        for ci in 0..self.cin {
            let src = &x[ci * plane..(ci + 1) * plane];
            let dst = &mut out[ci * p..(ci + 1) * p];
            for (oy, row) in dst.chunks_mut(self.wo).enumerate() {
                match self.source_row(ky, oy) {
                    None => row.fill(0.0),
                    Some(iy) => {
                        let line = &src[iy * self.w..(iy + 1) * self.w];
                        for (d, &ix) in row.iter_mut().zip(xm) {
                            *d = if ix >= 0 { line[ix as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::gather`]: add `cols` back into `x`.
    fn scatter_add(&self, cols: &[f64], ky: usize, xm: &[isize], x: &mut [f64]) {
        let (plane, p) = (self.h * self.w, self.ho * self.wo);
        for ci in 0..self.cin {
            let src = &cols[ci * p..(ci + 1) * p];
            let dst = &mut x[ci * plane..(ci + 1) * plane];
            for (oy, row) in src.chunks(self.wo).enumerate() {
                let Some(iy) = self.source_row(ky, oy) else { continue };
                let line = &mut dst[iy * self.w..(iy + 1) * self.w];
                for (&v, &ix) in row.iter().zip(xm) {
                    if ix >= 0 {
                        line[ix as usize] += v;
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` over strided `[m, k]`, `[k, n]` and `[m, n]` views.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm a view out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm b view out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm c view out of bounds");
    // SAFETY: the largest offset of every view is asserted in bounds above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl Graph {
    /// `x: [Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]` → `[Cout, Ho, Wo]`.
    ///
    /// Evaluated one kernel tap at a time: each tap gathers a shifted copy of
    /// the input and adds one `[Cout, Cin] × [Cin, Ho·Wo]` product.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin, k, k]");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        let (h, wd) = (xs[1], xs[2]);
        assert!(
            h + 2 * spec.pad >= k && wd + 2 * spec.pad >= k,
            "conv2d kernel larger than input"
        );
        let geo = Geometry {
            cin,
            h,
            w: wd,
            k,
            ho: (h + 2 * spec.pad - k) / spec.stride + 1,
            wo: (wd + 2 * spec.pad - k) / spec.stride + 1,
            spec,
        };
        let p = geo.ho * geo.wo;
        let kk = k * k;
        // weight view for one tap: [Cout, Cin] with strides (Cin·k², k²)
        let tap_view = (cin * kk, kk);
        let xmap = geo.column_map();
        let mut out = vec![0.0; cout * p];
        for (row, &bias) in out.chunks_mut(p).zip(self.value(b).data()) {
            row.fill(bias);
        }
        let mut buf = vec![0.0; cin * p];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for ky in 0..k {
            for (kx, xm) in xmap.iter().enumerate() {
                geo.gather(xv, ky, xm, &mut buf);
                let t = ky * k + kx;
                gemm_strided((cout, cin, p), &wv[t..], tap_view, &buf, (p, 1), &mut out, (p, 1), 1.0);
            }
        }
        let shape = [cout, geo.ho, geo.wo];
        self.custom(&[x, w, b], Tensor::from_vec(&shape, out), move |a| {
            let g = a.grad.data();
            let (xv, wv) = (a.inputs[0].data(), a.inputs[1].data());
            let mut buf = vec![0.0; cin * p];
            let mut gx = a.needs[0].then(|| vec![0.0; xv.len()]);
            let mut gw = a.needs[1].then(|| vec![0.0; wv.len()]);
            for ky in 0..k {
                for (kx, xm) in xmap.iter().enumerate() {
                    let t = ky * k + kx;
                    if let Some(gx) = gx.as_mut() {
                        // [Cin, Cout] (transposed tap) × [Cout, P]
                        gemm_strided(
                            (cin, cout, p),
                            &wv[t..],
                            (kk, cin * kk),
                            g,
                            (p, 1),
                            &mut buf,
                            (p, 1),
                            0.0,
                        );
                        geo.scatter_add(&buf, ky, xm, gx);
                    }
                    if let Some(gw) = gw.as_mut() {
                        geo.gather(xv, ky, xm, &mut buf);
                        // [Cout, P] × [P, Cin] written into the tap view
                        gemm_strided((cout, p, cin), g, (p, 1), &buf, (1, p), &mut gw[t..], tap_view, 0.0);
                    }
                }
            }
            let gb = a.needs[2].then(|| Tensor::from_vec(&[cout], g.chunks(p).map(|r| r.iter().sum()).collect()));
            vec![
                gx.map(|d| Tensor::from_vec(a.inputs[0].shape(), d)),
                gw.map(|d| Tensor::from_vec(a.inputs[1].shape(), d)),
                gb,
            ]
        })
    }

    /// Per-channel normalization over the spatial extent of a `[C, H, W]` map,
    /// without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xs = self.value(x);
        let shape = xs.shape().to_vec();
        assert_eq!(shape.len(), 3, "instance_norm input must be [C, H, W]");
        let plane = shape[1] * shape[2];
        let mut out = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(shape[0]);
        for (src, dst) in xs.data().chunks(plane).zip(out.chunks_mut(plane)) {
            let mean = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + EPS).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        self.custom(&[x], Tensor::from_vec(&shape, out), move |a| {
            let y = a.output.data();
            let g = a.grad.data();
            let mut d = vec![0.0; y.len()];
            for c in 0..inv_std.len() {
                let r = c * plane..(c + 1) * plane;
                let (yc, gc) = (&y[r.clone()], &g[r.clone()]);
                let mg = gc.iter().sum::<f64>() / plane as f64;
                let mgy = gc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
                for ((dv, &gv), &yv) in d[r].iter_mut().zip(gc).zip(yc) {
                    *dv = inv_std[c] * (gv - mg - yv * mgy);
                }
            }
            vec![Some(Tensor::from_vec(&shape, d))]
        })
    }
}
