//! Convolutional GRU refinement of the inverse-depth index map and convex
//! upsampling to full resolution.
//!
//! 2D maps are channel-first `[C, H/2, W/2]`. Every 3×3 convolution wraps
//! around the θ (width) axis and zero-pads along φ.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Graph, Padding, ParamStore, Var};
use crate::corr::{lookup, lookup_channels, sample_context, CorrelationPyramid};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Init};
use crate::tensor::Tensor;

/// Convex-combination logits per coarse cell: 2 × 2 children × 3 × 3 neighbors.
pub const MASK_CHANNELS: usize = 36;

#[derive(Clone, Debug)]
pub struct UpdateBlock {
    channels: usize,
    radius: usize,
    init_proj: Conv2d,
    conv_z: Conv2d,
    conv_r: Conv2d,
    conv_q: Conv2d,
    delta_a: Conv2d,
    delta_b: Conv2d,
    mask_a: Conv2d,
    mask_b: Conv2d,
}

impl UpdateBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, radius: usize) -> Self {
        let hidden = 2 * channels;
        let head = 4 * channels;
        let input = hidden + lookup_channels(radius) + channels;
        let wrap3 = ConvSpec::same(3, Padding::WrapWidth);
        let point = ConvSpec::same(1, Padding::Zero);
        let mut conv = |name: &str, cin, cout, k, spec| Conv2d::new(store, rng, name, cin, cout, k, spec, Init::LeCun);
        UpdateBlock {
            channels,
            radius,
            init_proj: conv("update.init_proj", channels, hidden, 1, point),
            conv_z: conv("update.gru.z", input, hidden, 3, wrap3),
            conv_r: conv("update.gru.r", input, hidden, 3, wrap3),
            conv_q: conv("update.gru.q", input, hidden, 3, wrap3),
            delta_a: conv("update.delta.a", hidden, head, 3, wrap3),
            delta_b: conv("update.delta.b", head, 1, 3, wrap3),
            mask_a: conv("update.mask.a", hidden, head, 3, wrap3),
            mask_b: conv("update.mask.b", head, MASK_CHANNELS, 1, point),
        }
    }

    pub fn hidden_channels(&self) -> usize {
        2 * self.channels
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// The two delta-head convolutions, outermost last.
    pub fn delta_head(&self) -> [&Conv2d; 2] {
        [&self.delta_a, &self.delta_b]
    }

    /// `tanh(proj(ctx at d = 0))` with `d = 0`.
    pub fn init_state(&self, g: &mut Graph, store: &ParamStore, ctx: Var) -> Result<InverseDepthState> {
        let s = g.shape(ctx).to_vec();
        if s.len() != 4 || s[3] != self.channels {
            return Err(Error::InvalidInput(format!(
                "context must be [H, W, D, {}], got {s:?}",
                self.channels
            )));
        }
        let d = g.constant(Tensor::zeros(&[s[0], s[1]]));
        let c0 = sample_context(g, ctx, d)?;
        let p = self.init_proj.forward(g, store, c0);
        let hidden = g.tanh(p);
        Ok(InverseDepthState {
            d,
            hidden,
            iteration: 0,
            history: Vec::new(),
        })
    }

    pub fn gru_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        corr_feat: Var,
        ctx_feat: Var,
    ) -> Result<Var> {
        let hs = g.shape(hidden).to_vec();
        let expect = |c: usize| vec![c, hs[1], hs[2]];
        if hs.len() != 3 || hs[0] != self.hidden_channels() {
            return Err(Error::InvalidInput(format!("hidden state has shape {hs:?}")));
        }
        if g.shape(corr_feat) != expect(lookup_channels(self.radius)) {
            return Err(Error::shape(
                "gru_step corr",
                &expect(lookup_channels(self.radius)),
                g.shape(corr_feat),
            ));
        }
        if g.shape(ctx_feat) != expect(self.channels) {
            return Err(Error::shape("gru_step ctx", &expect(self.channels), g.shape(ctx_feat)));
        }
        let hx = g.concat_first(&[hidden, corr_feat, ctx_feat]);
        let z = self.conv_z.forward(g, store, hx);
        let z = g.sigmoid(z);
        let r = self.conv_r.forward(g, store, hx);
        let r = g.sigmoid(r);
        let rh = g.mul(r, hidden);
        let rhx = g.concat_first(&[rh, corr_feat, ctx_feat]);
        let q = self.conv_q.forward(g, store, rhx);
        let q = g.tanh(q);
        // h' = h + z (q − h)
        let dq = g.sub(q, hidden);
        let step = g.mul(z, dq);
        Ok(g.add(hidden, step))
    }

    /// Residual `Δd`, shape `[H, W]`.
    pub fn predict_delta(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Var {
        let (h, w) = (g.shape(hidden)[1], g.shape(hidden)[2]);
        let x = self.delta_a.forward(g, store, hidden);
        let x = g.relu(x);
        let x = self.delta_b.forward(g, store, x);
        g.reshape(x, &[h, w])
    }

    /// Upsampling logits, shape `[36, H, W]`.
    pub fn predict_mask(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Var {
        let x = self.mask_a.forward(g, store, hidden);
        let x = g.relu(x);
        self.mask_b.forward(g, store, x)
    }

    /// One full refinement round on `state`.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &mut InverseDepthState,
        pyramid: &CorrelationPyramid,
        ctx: Var,
    ) -> Result<()> {
        let ctx_feat = sample_context(g, ctx, state.d)?;
        let corr_feat = lookup(g, pyramid, state.d, self.radius)?;
        state.hidden = self.gru_step(g, store, state.hidden, corr_feat, ctx_feat)?;
        let delta = self.predict_delta(g, store, state.hidden);
        state.d = g.add(state.d, delta);
        let mask = self.predict_mask(g, store, state.hidden);
        let full = convex_upsample(g, state.d, mask)?;
        state.iteration += 1;
        for (what, v) in [("inverse-depth estimate", state.d), ("upsampled prediction", full)] {
            if !g.value(v).all_finite() {
                return Err(Error::NumericFailure {
                    iteration: state.iteration,
                    what: format!("non-finite {what}"),
                });
            }
        }
        state.history.push(full);
        Ok(())
    }

    /// `init_state` followed by `iters` refinement rounds.
    pub fn run_iterations(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pyramid: &CorrelationPyramid,
        ctx: Var,
        iters: usize,
    ) -> Result<InverseDepthState> {
        if iters == 0 {
            return Err(Error::InvalidInput("at least one iteration is required".into()));
        }
        let mut state = self.init_state(g, store, ctx)?;
        for _ in 0..iters {
            self.step(g, store, &mut state, pyramid, ctx)?;
        }
        Ok(state)
    }
}

/// Half-resolution estimate, GRU state and the full-resolution history
/// (full-index units, one entry per completed iteration).
#[derive(Clone, Debug)]
pub struct InverseDepthState {
    pub d: Var,
    pub hidden: Var,
    pub iteration: usize,
    pub history: Vec<Var>,
}

/// Convex upsampling by two. `d: [H, W]` in half-index units,
/// `mask: [36, H, W]` with channel `(a·2 + b)·9 + k` for the child at row
/// offset `a`, column offset `b`, and neighbor `k` (row-major 3×3, center 4).
/// Borders replicate. The result is in full-index units, `[2H, 2W]`.
pub fn convex_upsample(g: &mut Graph, d: Var, mask: Var) -> Result<Var> {
    let ds = g.shape(d).to_vec();
    if ds.len() != 2 {
        return Err(Error::InvalidInput(format!("estimate must be 2-D, got {ds:?}")));
    }
    let (h, w) = (ds[0], ds[1]);
    if g.shape(mask) != [MASK_CHANNELS, h, w] {
        return Err(Error::shape("convex_upsample", &[MASK_CHANNELS, h, w], g.shape(mask)));
    }
    let plane = h * w;
    let neighbor = move |y: usize, x: usize, k: usize| {
        let ny = (y as isize + k as isize / 3 - 1).clamp(0, h as isize - 1) as usize;
        let nx = (x as isize + k as isize % 3 - 1).clamp(0, w as isize - 1) as usize;
        ny * w + nx
    };
    // softmax weights, laid out like the mask
    let logits = g.value(mask).data();
    let mut probs = vec![0.0; logits.len()];
    for child in 0..4 {
        for cell in 0..plane {
            let at = |k: usize| (child * 9 + k) * plane + cell;
            let m = (0..9).map(|k| logits[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..9 {
                let e = (logits[at(k)] - m).exp();
                probs[at(k)] = e;
                z += e;
            }
            for k in 0..9 {
                probs[at(k)] /= z;
            }
        }
    }
    let dv = g.value(d).data();
    let mut out = vec![0.0; 4 * plane];
    for y in 0..h {
        for x in 0..w {
            let cell = y * w + x;
            for a in 0..2 {
                for b in 0..2 {
                    let child = a * 2 + b;
                    let v: f64 = (0..9)
                        .map(|k| probs[(child * 9 + k) * plane + cell] * dv[neighbor(y, x, k)])
                        .sum();
                    out[(2 * y + a) * 2 * w + 2 * x + b] = 2.0 * v;
                }
            }
        }
    }
    Ok(
        g.custom(&[d, mask], Tensor::from_vec(&[2 * h, 2 * w], out), move |args| {
            let go = args.grad.data();
            let dv = args.inputs[0].data();
            let mut gd = vec![0.0; plane];
            let mut gm = vec![0.0; MASK_CHANNELS * plane];
            for y in 0..h {
                for x in 0..w {
                    let cell = y * w + x;
                    for a in 0..2 {
                        for b in 0..2 {
                            let child = a * 2 + b;
                            let gv = 2.0 * go[(2 * y + a) * 2 * w + 2 * x + b];
                            let mut mean = 0.0;
                            for k in 0..9 {
                                let p = probs[(child * 9 + k) * plane + cell];
                                let n = neighbor(y, x, k);
                                gd[n] += gv * p;
                                mean += p * dv[n];
                            }
                            for k in 0..9 {
                                let i = (child * 9 + k) * plane + cell;
                                gm[i] = gv * probs[i] * (dv[neighbor(y, x, k)] - mean);
                            }
                        }
                    }
                }
            }
            vec![
                args.needs[0].then(|| Tensor::from_vec(&[h, w], gd)),
                args.needs[1].then(|| Tensor::from_vec(&[MASK_CHANNELS, h, w], gm)),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corr::{build_pyramid, LOOKUP_RADIUS};
    use crate::gradcheck::{check_inputs, check_params, projection, weighted_total, DEFAULT_STEP};
    use rand::SeedableRng;

    fn block(c: usize) -> (ParamStore, UpdateBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = UpdateBlock::new(&mut store, &mut rng, c, LOOKUP_RADIUS);
        (store, b)
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            *store.get_mut(id) = Tensor::zeros(store.get(id).shape());
        }
    }

    #[test]
    fn init_state_zero_context() {
        let (mut store, b) = block(2);
        let bias = store.find("update.init_proj.bias").unwrap();
        *store.get_mut(bias) = Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.0]);
        let mut g = Graph::new();
        let ctx = g.constant(Tensor::zeros(&[2, 4, 8, 2]));
        let st = b.init_state(&mut g, &store, ctx).unwrap();
        assert_eq!(g.shape(st.hidden), &[4, 2, 4]);
        assert!(g.value(st.d).data().iter().all(|&v| v == 0.0));
        for (ch, bv) in [0.1f64, -0.2, 0.3, 0.0].into_iter().enumerate() {
            assert!(g.value(st.hidden).data()[ch * 8..(ch + 1) * 8]
                .iter()
                .all(|&v| v == bv.tanh()));
        }
    }

    #[test]
    fn gru_zero_weights_halves_hidden() {
        let (mut store, b) = block(2);
        zero_all(&mut store);
        let mut g = Graph::new();
        let h0 = projection(&[4, 2, 4], 1).map(|v| 0.9 * v);
        let h = g.constant(h0.clone());
        let corr = g.constant(projection(&[36, 2, 4], 2));
        let ctx = g.constant(projection(&[2, 2, 4], 3));
        let h1 = b.gru_step(&mut g, &store, h, corr, ctx).unwrap();
        assert!(g.value(h1).max_abs_diff(&h0.map(|v| 0.5 * v)) < 1e-15);
    }

    #[test]
    fn gru_keeps_hidden_bounded() {
        let (store, b) = block(2);
        let mut g = Graph::new();
        let h = g.constant(projection(&[4, 2, 4], 1).map(|v| 0.999 * v));
        let corr = g.constant(projection(&[36, 2, 4], 2).map(|v| 3.0 * v));
        let ctx = g.constant(projection(&[2, 2, 4], 3).map(|v| 3.0 * v));
        let h1 = b.gru_step(&mut g, &store, h, corr, ctx).unwrap();
        assert!(g.value(h1).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_delta_head_keeps_estimate() {
        let (mut store, b) = block(2);
        for conv in b.delta_head() {
            *store.get_mut(conv.weight) = Tensor::zeros(store.get(conv.weight).shape());
            *store.get_mut(conv.bias) = Tensor::zeros(store.get(conv.bias).shape());
        }
        let mut g = Graph::new();
        let ctx = g.constant(projection(&[2, 4, 8, 2], 4));
        let corr = g.constant(projection(&[2, 4, 8], 5));
        let pyr = build_pyramid(&mut g, corr).unwrap();
        let st = b.run_iterations(&mut g, &store, &pyr, ctx, 3).unwrap();
        assert_eq!(st.history.len(), 3);
        assert_eq!(st.iteration, 3);
        for &p in &st.history {
            assert_eq!(g.shape(p), &[4, 8]);
            assert!(g.value(p).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn update_is_additive() {
        let (store, b) = block(2);
        let mut g = Graph::new();
        let ctx = g.constant(projection(&[2, 4, 8, 2], 4));
        let corr = g.constant(projection(&[2, 4, 8], 5));
        let pyr = build_pyramid(&mut g, corr).unwrap();
        let mut st = b.init_state(&mut g, &store, ctx).unwrap();
        b.step(&mut g, &store, &mut st, &pyr, ctx).unwrap();
        let d1 = g.value(st.d).clone();
        let hidden = st.hidden;
        b.step(&mut g, &store, &mut st, &pyr, ctx).unwrap();
        let delta = b.predict_delta(&mut g, &store, st.hidden);
        assert_eq!(g.shape(delta), &[2, 4]);
        assert_ne!(hidden, st.hidden);
        let expect = d1.zip_map(g.value(delta), |a, b| a + b);
        assert!(g.value(st.d).max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn non_finite_estimate_reports_iteration() {
        let (mut store, b) = block(2);
        let bias = b.delta_head()[1].bias;
        *store.get_mut(bias) = Tensor::from_vec(&[1], vec![f64::NAN]);
        let mut g = Graph::new();
        let ctx = g.constant(projection(&[2, 4, 8, 2], 4));
        let corr = g.constant(projection(&[2, 4, 8], 5));
        let pyr = build_pyramid(&mut g, corr).unwrap();
        match b.run_iterations(&mut g, &store, &pyr, ctx, 2) {
            Err(Error::NumericFailure { iteration, .. }) => assert_eq!(iteration, 1),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    fn one_hot_center() -> Tensor {
        Tensor::from_fn(&[36, 2, 3], |i| if (i / 6) % 9 == 4 { 30.0 } else { -30.0 })
    }

    #[test]
    fn convex_upsample_special_masks() {
        let coarse = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::new();
        let d = g.constant(coarse.clone());
        let m = g.constant(one_hot_center());
        let up = convex_upsample(&mut g, d, m).unwrap();
        assert_eq!(g.shape(up), &[4, 6]);
        for y in 0..4 {
            for x in 0..6 {
                let v = g.value(up).data()[y * 6 + x];
                assert!((v - 2.0 * coarse.data()[(y / 2) * 3 + x / 2]).abs() < 1e-9);
            }
        }

        let m = g.constant(Tensor::zeros(&[36, 2, 3]));
        let up = convex_upsample(&mut g, d, m).unwrap();
        // fine pixel (0, 0): replicated 3×3 around coarse (0, 0) = 1,1,2 / 1,1,2 / 4,4,5
        let mean = (1.0 + 1.0 + 2.0 + 1.0 + 1.0 + 2.0 + 4.0 + 4.0 + 5.0) / 9.0;
        assert!((g.value(up).data()[0] - 2.0 * mean).abs() < 1e-12);

        let c = g.constant(Tensor::full(&[2, 3], 1.7));
        let m = g.constant(projection(&[36, 2, 3], 8).map(|v| 10.0 * v));
        let up = convex_upsample(&mut g, c, m).unwrap();
        assert!(g.value(up).data().iter().all(|v| (v - 3.4).abs() < 1e-12));
    }

    #[test]
    fn convex_upsample_gradients() {
        let f = |g: &mut Graph, v: &[Var]| {
            let up = convex_upsample(g, v[0], v[1]).unwrap();
            weighted_total(g, up, projection(&[4, 8], 3))
        };
        let inputs = [projection(&[2, 4], 1), projection(&[36, 2, 4], 2)];
        for e in check_inputs(&inputs, f, DEFAULT_STEP, 300) {
            assert!(e < 1e-6, "{e}");
        }
    }

    #[test]
    fn gru_gradients() {
        let (store, b) = block(2);
        let hidden = projection(&[4, 4, 8], 1).map(|v| 0.5 * v);
        let corr = projection(&[36, 4, 8], 2);
        let ctx = projection(&[2, 4, 8], 3);
        let wout = projection(&[4, 4, 8], 4);
        let f = |g: &mut Graph, v: &[Var]| {
            let h = b.gru_step(g, &store, v[0], v[1], v[2]).unwrap();
            weighted_total(g, h, wout.clone())
        };
        for e in check_inputs(&[hidden.clone(), corr.clone(), ctx.clone()], f, DEFAULT_STEP, 100) {
            assert!(e < 1e-6, "{e}");
        }
        let fp = |g: &mut Graph, s: &ParamStore| {
            let (h, c, x) = (
                g.constant(hidden.clone()),
                g.constant(corr.clone()),
                g.constant(ctx.clone()),
            );
            let h = b.gru_step(g, s, h, c, x).unwrap();
            weighted_total(g, h, wout.clone())
        };
        for (name, e) in check_params(&store, fp, DEFAULT_STEP, 40) {
            if name.starts_with("update.gru") {
                assert!(e < 1e-6, "{name}: {e}");
            }
        }
    }
}
