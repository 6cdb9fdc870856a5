//! Generic differentiable operations.

use super::{Graph, Var};
use crate::tensor::Tensor;

/// `c = a·b (+ beta·c)` where `a` is logically `[m, k]` and `b` is `[k, n]`.
/// A transposed operand is stored in the opposite orientation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn unary(g: &mut Graph, x: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
    let out = g.value(x).map(f);
    // df(input, output)
    g.custom(&[x], out, move |a| {
        let x = a.inputs[0];
        let data = x
            .data()
            .iter()
            .zip(a.output.data())
            .zip(a.grad.data())
            .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
            .collect();
        vec![Some(Tensor::from_vec(x.shape(), data))]
    })
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(&[a, b], out, |a| vec![Some(a.grad.clone()), Some(a.grad.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(&[a, b], out, |a| vec![Some(a.grad.clone()), Some(a.grad.map(|v| -v))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(&[a, b], out, |a| {
            let ga = a.needs[0].then(|| a.grad.zip_map(a.inputs[1], |g, y| g * y));
            let gb = a.needs[1].then(|| a.grad.zip_map(a.inputs[0], |g, x| g * x));
            vec![ga, gb]
        })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.custom(&[x], out, move |a| vec![Some(a.grad.map(|g| g * s))])
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 - v);
        self.custom(&[x], out, |a| vec![Some(a.grad.map(|g| -g))])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        unary(self, x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        unary(self, x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        unary(self, x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let in_shape = self.shape(x).to_vec();
        let out = self.value(x).clone().reshape(shape);
        self.custom(&[x], out, move |a| vec![Some(a.grad.clone().reshape(&in_shape))])
    }

    /// Concatenate along the first axis (channels of a `[C, H, W]` map).
    pub fn concat_first(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rest: Vec<usize> = self.shape(xs[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            assert_eq!(&t.shape()[1..], &rest[..], "concat_first shape mismatch");
            lead += t.shape()[0];
            sizes.push(t.len());
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(&rest);
        self.custom(xs, Tensor::from_vec(&shape, data), move |a| {
            let mut off = 0;
            a.inputs
                .iter()
                .zip(&sizes)
                .zip(a.needs)
                .map(|((inp, &n), &need)| {
                    let g = need.then(|| Tensor::from_vec(inp.shape(), a.grad.data()[off..off + n].to_vec()));
                    off += n;
                    g
                })
                .collect()
        })
    }

    /// Concatenate along the last axis (channels of a `[H, W, D, C]` volume).
    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let lead: Vec<usize> = {
            let s = self.shape(xs[0]);
            s[..s.len() - 1].to_vec()
        };
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).last_dim()).collect();
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(&s[..s.len() - 1], &lead[..], "concat_last shape mismatch");
        }
        let total: usize = widths.iter().sum();
        let cells: usize = lead.iter().product();
        let mut data = vec![0.0; cells * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let src = self.value(x).data();
            for c in 0..cells {
                data[c * total + off..c * total + off + w].copy_from_slice(&src[c * w..(c + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead.clone();
        shape.push(total);
        self.custom(xs, Tensor::from_vec(&shape, data), move |a| {
            let g = a.grad.data();
            let mut off = 0;
            widths
                .iter()
                .zip(a.inputs)
                .zip(a.needs)
                .map(|((&w, inp), &need)| {
                    let out = need.then(|| {
                        let mut d = vec![0.0; cells * w];
                        for c in 0..cells {
                            d[c * w..(c + 1) * w].copy_from_slice(&g[c * total + off..c * total + off + w]);
                        }
                        Tensor::from_vec(inp.shape(), d)
                    });
                    off += w;
                    out
                })
                .collect()
        })
    }

    /// Pointwise affine map over the last axis: `x[..., Cin] · w[Cin, Cout] + b[Cout]`.
    /// This is a 1×1 convolution over a channel-last volume.
    pub fn linear_last(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let (cin, cout) = (ws.shape()[0], ws.shape()[1]);
        assert_eq!(xs.last_dim(), cin, "linear_last input width");
        assert_eq!(self.value(b).shape(), &[cout], "linear_last bias");
        let p = xs.len() / cin;
        let mut out = vec![0.0; p * cout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bias);
        }
        gemm(p, cin, cout, xs.data(), false, ws.data(), false, &mut out, 1.0);
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        self.custom(&[x, w, b], Tensor::from_vec(&shape, out), move |a| {
            let (xv, wv) = (a.inputs[0], a.inputs[1]);
            let g = a.grad.data();
            let gx = a.needs[0].then(|| {
                let mut d = vec![0.0; p * cin];
                gemm(p, cout, cin, g, false, wv.data(), true, &mut d, 0.0);
                Tensor::from_vec(xv.shape(), d)
            });
            let gw = a.needs[1].then(|| {
                let mut d = vec![0.0; cin * cout];
                gemm(cin, p, cout, xv.data(), true, g, false, &mut d, 0.0);
                Tensor::from_vec(&[cin, cout], d)
            });
            let gb = a.needs[2].then(|| {
                let mut d = vec![0.0; cout];
                for row in g.chunks(cout) {
                    for (acc, v) in d.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::from_vec(&[cout], d)
            });
            vec![gx, gw, gb]
        })
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let k = xs.last_dim();
        let mut out = xs.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = xs.shape().to_vec();
        self.custom(&[x], Tensor::from_vec(&shape, out), move |a| {
            let y = a.output.data();
            let g = a.grad.data();
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for i in 0..k {
                    dr[i] = yr[i] * (gr[i] - dot);
                }
            }
            vec![Some(Tensor::from_vec(&shape, d))]
        })
    }

    /// `w ⊙ a + (1 − w) ⊙ b` with `a, b: [..., C]` and `w: [..., 1]` broadcast over channels.
    pub fn blend(&mut self, a: Var, b: Var, w: Var) -> Var {
        let (av, bv, wv) = (self.value(a), self.value(b), self.value(w));
        assert_eq!(av.shape(), bv.shape(), "blend operand shapes");
        let c = av.last_dim();
        assert_eq!(wv.last_dim(), 1, "blend weight must have one channel");
        assert_eq!(wv.len() * c, av.len(), "blend weight cell count");
        let mut out = vec![0.0; av.len()];
        for (cell, &wc) in wv.data().iter().enumerate() {
            for ch in 0..c {
                let i = cell * c + ch;
                out[i] = wc * av.data()[i] + (1.0 - wc) * bv.data()[i];
            }
        }
        let shape = av.shape().to_vec();
        self.custom(&[a, b, w], Tensor::from_vec(&shape, out), move |args| {
            let (av, bv, wv) = (args.inputs[0], args.inputs[1], args.inputs[2]);
            let g = args.grad.data();
            let mut ga = vec![0.0; g.len()];
            let mut gb = vec![0.0; g.len()];
            let mut gw = vec![0.0; wv.len()];
            for (cell, &wc) in wv.data().iter().enumerate() {
                let mut acc = 0.0;
                for ch in 0..c {
                    let i = cell * c + ch;
                    ga[i] = wc * g[i];
                    gb[i] = (1.0 - wc) * g[i];
                    acc += g[i] * (av.data()[i] - bv.data()[i]);
                }
                gw[cell] = acc;
            }
            vec![
                args.needs[0].then(|| Tensor::from_vec(av.shape(), ga)),
                args.needs[1].then(|| Tensor::from_vec(bv.shape(), gb)),
                args.needs[2].then(|| Tensor::from_vec(wv.shape(), gw)),
            ]
        })
    }

    /// `Σ_k w[..., k] ⊙ vols[k]` with each volume `[..., C]` and `w: [..., K]`.
    pub fn weighted_sum(&mut self, vols: &[Var], w: Var) -> Var {
        let k = vols.len();
        let wv = self.value(w);
        assert_eq!(wv.last_dim(), k, "weighted_sum weight width");
        let shape = self.shape(vols[0]).to_vec();
        let c = *shape.last().unwrap();
        let cells = wv.len() / k;
        let mut out = vec![0.0; cells * c];
        for (j, &v) in vols.iter().enumerate() {
            let vd = self.value(v);
            assert_eq!(vd.shape(), &shape[..], "weighted_sum volume shapes");
            let wd = self.value(w).data();
            for cell in 0..cells {
                let wc = wd[cell * k + j];
                for ch in 0..c {
                    out[cell * c + ch] += wc * vd.data()[cell * c + ch];
                }
            }
        }
        let mut parents = vols.to_vec();
        parents.push(w);
        self.custom(&parents, Tensor::from_vec(&shape, out), move |a| {
            let g = a.grad.data();
            let wv = a.inputs[k];
            let wd = wv.data();
            let mut grads: Vec<Option<Tensor>> = (0..k)
                .map(|j| {
                    a.needs[j].then(|| {
                        let mut d = vec![0.0; g.len()];
                        for cell in 0..cells {
                            let wc = wd[cell * k + j];
                            for ch in 0..c {
                                d[cell * c + ch] = wc * g[cell * c + ch];
                            }
                        }
                        Tensor::from_vec(&shape, d)
                    })
                })
                .collect();
            let gw = a.needs[k].then(|| {
                let mut d = vec![0.0; wv.len()];
                for j in 0..k {
                    let vd = a.inputs[j].data();
                    for cell in 0..cells {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += g[cell * c + ch] * vd[cell * c + ch];
                        }
                        d[cell * k + j] = acc;
                    }
                }
                Tensor::from_vec(wv.shape(), d)
            });
            grads.push(gw);
            grads
        })
    }
}
