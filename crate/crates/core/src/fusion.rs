//! Fusion of the four spherical feature volumes into reference and target
//! volumes, and the context volume.
//!
//! The reference side draws only on front/back, the target side only on
//! right/left. All volumes are channel-last `[H/2, W/2, N/2, C]`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::camera::RigCalibration;
use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::sweep::SweepConfig;
use crate::tensor::Tensor;

/// Rig slot indices.
pub const FRONT: usize = 0;
pub const RIGHT: usize = 1;
pub const BACK: usize = 2;
pub const LEFT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "adaptive")]
    AdaptiveOpposite,
    #[serde(rename = "interleave")]
    Interleave,
    #[serde(rename = "all")]
    AllWeighting,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [
        FusionMode::AdaptiveOpposite,
        FusionMode::Interleave,
        FusionMode::AllWeighting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::AdaptiveOpposite => "adaptive",
            FusionMode::Interleave => "interleave",
            FusionMode::AllWeighting => "all",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}` (adaptive|interleave|all)")))
    }
}

/// Pointwise two-layer perceptron with a rectified hidden layer and a
/// zero-initialized output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, widths: (usize, usize, usize)) -> Self {
        let (cin, chid, cout) = widths;
        Mlp {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), cin, chid, Init::LeCun),
            out: Linear::new(store, rng, &format!("{name}.out"), chid, cout, Init::Zero),
        }
    }

    /// `(input, hidden, output)` node counts.
    pub fn widths(&self, store: &ParamStore) -> (usize, usize, usize) {
        (
            self.hidden.in_features(store),
            self.hidden.out_features(store),
            self.out.out_features(store),
        )
    }

    /// Output logits, before the final activation.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.hidden.forward(g, store, x);
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

fn volume_shape(g: &Graph, op: &'static str, v: Var) -> Result<[usize; 4]> {
    let s = g.shape(v);
    if s.len() != 4 {
        return Err(Error::InvalidInput(format!("{op}: expected a 4-D volume, got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Per-cell sigmoid weight from `[S_a ‖ S_b (‖ G_a ‖ G_b)]`; shape `[H/2, W/2, N/2, 1]`.
pub fn adaptive_weights(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &Mlp,
    s_a: Var,
    s_b: Var,
    embeds: Option<(Var, Var)>,
) -> Result<Var> {
    same_shape(g, "adaptive_weights", s_a, s_b)?;
    let [h, w, d, c] = volume_shape(g, "adaptive_weights", s_a)?;
    let mut parts = vec![s_a, s_b];
    if let Some((ga, gb)) = embeds {
        for e in [ga, gb] {
            if g.shape(e) != [h, w, d, 2] {
                return Err(Error::shape("adaptive_weights embedding", &[h, w, d, 2], g.shape(e)));
            }
            parts.push(e);
        }
    }
    let expected_in = mlp.widths(store).0;
    let got_in = 2 * c + if embeds.is_some() { 4 } else { 0 };
    if expected_in != got_in {
        return Err(Error::InvalidInput(format!(
            "fusion MLP takes {expected_in} inputs but the volumes provide {got_in}"
        )));
    }
    let x = g.concat_last(&parts);
    let logits = mlp.forward(g, store, x);
    Ok(g.sigmoid(logits))
}

/// `W ⊙ S_a + (1 − W) ⊙ S_b`, broadcast over channels.
pub fn fuse_opposite(g: &mut Graph, s_a: Var, s_b: Var, w: Var) -> Result<Var> {
    same_shape(g, "fuse_opposite", s_a, s_b)?;
    let [h, wd, d, _] = volume_shape(g, "fuse_opposite", s_a)?;
    if g.shape(w) != [h, wd, d, 1] {
        return Err(Error::shape("fuse_opposite weights", &[h, wd, d, 1], g.shape(w)));
    }
    Ok(g.blend(s_a, s_b, w))
}

/// Azimuth `θ` of a rig-frame direction under the panorama convention.
pub fn azimuth(dir: &Vector3<f64>) -> f64 {
    dir.z.atan2(dir.x)
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Columns taken from the primary volume: the half of the θ axis whose
/// centers lie closest in heading to `primary_theta`. The rest come from the
/// opposite camera. With `primary_theta = 0` this is the middle half.
pub fn interleave_columns(cfg: &SweepConfig, cols: usize, primary_theta: f64) -> Result<Vec<bool>> {
    if cols == 0 || !cols.is_multiple_of(4) {
        return Err(Error::InvalidInput(format!(
            "interleaving needs a column count divisible by 4, got {cols}"
        )));
    }
    let mut order: Vec<(f64, usize)> = (0..cols)
        .map(|j| (wrap_angle(cfg.theta(j, cols) - primary_theta).abs(), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut mask = vec![false; cols];
    for &(_, j) in order.iter().take(cols / 2) {
        mask[j] = true;
    }
    Ok(mask)
}

/// Column masks for both sides, centered on the front (reference) and
/// right (target) camera headings.
#[derive(Clone, Debug, PartialEq)]
pub struct InterleaveLayout {
    pub reference: Vec<bool>,
    pub target: Vec<bool>,
}

impl InterleaveLayout {
    pub fn new(rig: &RigCalibration, cfg: &SweepConfig) -> Result<Self> {
        let cols = cfg.half_size().1;
        Ok(InterleaveLayout {
            reference: interleave_columns(cfg, cols, azimuth(&rig.cameras[FRONT].axis()))?,
            target: interleave_columns(cfg, cols, azimuth(&rig.cameras[RIGHT].axis()))?,
        })
    }
}

/// Binary blend: columns with `mask[j]` from `S_a`, all others from `S_b`.
/// The mask is the same for every sphere.
pub fn fuse_interleave(g: &mut Graph, s_a: Var, s_b: Var, columns: &[bool]) -> Result<Var> {
    same_shape(g, "fuse_interleave", s_a, s_b)?;
    let [h, w, d, _] = volume_shape(g, "fuse_interleave", s_a)?;
    if columns.len() != w {
        return Err(Error::InvalidInput(format!(
            "interleave mask has {} columns, volume has {w}",
            columns.len()
        )));
    }
    let weights = Tensor::from_fn(&[h, w, d, 1], |i| if columns[(i / d) % w] { 1.0 } else { 0.0 });
    let wv = g.constant(weights);
    Ok(g.blend(s_a, s_b, wv))
}

/// Softmax-weighted sums of all four volumes, one 4-way MLP per side.
pub fn fuse_all_weighting(
    g: &mut Graph,
    store: &ParamStore,
    ref_mlp: &Mlp,
    tgt_mlp: &Mlp,
    vols: &[Var; 4],
) -> Result<(Var, Var)> {
    for v in &vols[1..] {
        same_shape(g, "fuse_all_weighting", vols[0], *v)?;
    }
    let [_, _, _, c] = volume_shape(g, "fuse_all_weighting", vols[0])?;
    for mlp in [ref_mlp, tgt_mlp] {
        if mlp.widths(store).0 != 4 * c {
            return Err(Error::InvalidInput(format!(
                "all-weighting MLP takes {} inputs, volumes provide {}",
                mlp.widths(store).0,
                4 * c
            )));
        }
    }
    let x = g.concat_last(vols);
    let mut out = [vols[0]; 2];
    for (slot, mlp) in [ref_mlp, tgt_mlp].into_iter().enumerate() {
        let logits = mlp.forward(g, store, x);
        let w = g.softmax_last(logits);
        out[slot] = g.weighted_sum(vols, w);
    }
    Ok((out[0], out[1]))
}

/// The context volume: the reference volume itself, or zeros when adaptive
/// context is disabled.
pub fn init_context(g: &mut Graph, s_ref: Var, adaptive: bool) -> Var {
    if adaptive {
        s_ref
    } else {
        let shape = g.shape(s_ref).to_vec();
        g.constant(Tensor::zeros(&shape))
    }
}

/// Learnable fusion stage for one configuration.
#[derive(Clone, Debug)]
pub struct VolumeFusion {
    mode: FusionMode,
    grid_embedding: bool,
    channels: usize,
    reference_mlp: Option<Mlp>,
    target_mlp: Option<Mlp>,
}

impl VolumeFusion {
    /// Node counts per MLP for a mode: `(input, hidden, output)`.
    pub fn mlp_widths(mode: FusionMode, grid_embedding: bool, channels: usize) -> Option<(usize, usize, usize)> {
        match mode {
            FusionMode::AdaptiveOpposite => Some((2 * channels + if grid_embedding { 4 } else { 0 }, channels, 1)),
            FusionMode::AllWeighting => Some((4 * channels, channels, 4)),
            FusionMode::Interleave => None,
        }
    }

    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        mode: FusionMode,
        grid_embedding: bool,
        channels: usize,
    ) -> Self {
        let (reference_mlp, target_mlp) = match Self::mlp_widths(mode, grid_embedding, channels) {
            Some(widths) => {
                let r = Mlp::new(store, rng, "fusion.reference", widths);
                let t = Mlp::new(store, rng, "fusion.target", widths);
                assert_eq!(r.widths(store), widths);
                assert_eq!(t.widths(store), widths);
                (Some(r), Some(t))
            }
            None => (None, None),
        };
        VolumeFusion {
            mode,
            grid_embedding,
            channels,
            reference_mlp,
            target_mlp,
        }
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Grid embedding only feeds the opposite-weighting MLPs.
    pub fn uses_grid_embedding(&self) -> bool {
        self.grid_embedding && self.mode == FusionMode::AdaptiveOpposite
    }

    pub fn mlps(&self) -> Vec<&Mlp> {
        self.reference_mlp.iter().chain(self.target_mlp.iter()).collect()
    }

    /// `(S_ref, S_tgt)` from volumes in rig order. `embeds` are the grid
    /// embeddings in rig order, required iff grid embedding is used.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vols: &[Var; 4],
        embeds: Option<&[Var; 4]>,
        layout: &InterleaveLayout,
    ) -> Result<(Var, Var)> {
        match self.mode {
            FusionMode::AdaptiveOpposite => {
                let pick = |a: usize, b: usize| {
                    if self.uses_grid_embedding() {
                        embeds.map(|e| (e[a], e[b]))
                    } else {
                        None
                    }
                };
                if self.uses_grid_embedding() && embeds.is_none() {
                    return Err(Error::InvalidInput("grid embeddings missing".into()));
                }
                let rm = self.reference_mlp.as_ref().expect("adaptive mode has MLPs");
                let tm = self.target_mlp.as_ref().expect("adaptive mode has MLPs");
                let wf = adaptive_weights(g, store, rm, vols[FRONT], vols[BACK], pick(FRONT, BACK))?;
                let s_ref = fuse_opposite(g, vols[FRONT], vols[BACK], wf)?;
                let wr = adaptive_weights(g, store, tm, vols[RIGHT], vols[LEFT], pick(RIGHT, LEFT))?;
                let s_tgt = fuse_opposite(g, vols[RIGHT], vols[LEFT], wr)?;
                Ok((s_ref, s_tgt))
            }
            FusionMode::Interleave => {
                let s_ref = fuse_interleave(g, vols[FRONT], vols[BACK], &layout.reference)?;
                let s_tgt = fuse_interleave(g, vols[RIGHT], vols[LEFT], &layout.target)?;
                Ok((s_ref, s_tgt))
            }
            FusionMode::AllWeighting => fuse_all_weighting(
                g,
                store,
                self.reference_mlp.as_ref().expect("all-weighting has MLPs"),
                self.target_mlp.as_ref().expect("all-weighting has MLPs"),
                vols,
            ),
        }
    }
}
