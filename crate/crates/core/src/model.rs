//! The full network: features → spherical sweep → fusion → correlation
//! pyramid → recurrent refinement.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::camera::RigCalibration;
use crate::corr::{build_pyramid, correlation_volume, LOOKUP_RADIUS};
use crate::error::{Error, Result};
use crate::features::FeatureNet;
use crate::fusion::{init_context, FusionMode, InterleaveLayout, VolumeFusion};
use crate::sweep::{load_or_build_grids, warp_features, SweepConfig, SweepGrids};
use crate::tensor::Tensor;
use crate::update::{InverseDepthState, UpdateBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Base channel count C; the GRU hidden state has 2C channels.
    pub base_channels: usize,
    /// Residual blocks in the feature extractor.
    pub feature_blocks: usize,
    /// Recurrent iterations M.
    pub iterations: usize,
    pub fusion: FusionMode,
    /// Feed fisheye sampling coordinates to the fusion MLPs.
    pub grid_embedding: bool,
    /// Context volume from the reference volume (otherwise zeros).
    pub adaptive_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 8,
            feature_blocks: 6,
            iterations: 12,
            fusion: FusionMode::AdaptiveOpposite,
            grid_embedding: true,
            adaptive_context: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("model.base_channels must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("model.iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything derived from the rig and sweep configuration that the network
/// reads but never learns.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub rig: RigCalibration,
    pub sweep: SweepConfig,
    pub grids: Vec<Arc<SweepGrids>>,
    pub layout: Option<InterleaveLayout>,
}

impl Geometry {
    pub fn new(rig: &RigCalibration, sweep: &SweepConfig, cache_dir: Option<&Path>) -> Result<Self> {
        if !sweep.num_spheres.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "sweep.num_spheres must be a multiple of 16 for the correlation pyramid, got {}",
                sweep.num_spheres
            )));
        }
        let grids = load_or_build_grids(rig, sweep, cache_dir)?
            .into_iter()
            .map(Arc::new)
            .collect();
        let cols = sweep.half_size().1;
        let layout = if cols.is_multiple_of(4) {
            Some(InterleaveLayout::new(rig, sweep)?)
        } else {
            None
        };
        Ok(Geometry {
            rig: rig.clone(),
            sweep: sweep.clone(),
            grids,
            layout,
        })
    }

    /// Fisheye image size `(width, height)`.
    pub fn image_size(&self) -> (usize, usize) {
        self.rig.cameras[0].resolution
    }
}

/// Per-run outputs of [`Model::forward`].
pub struct ForwardOutput {
    pub state: InverseDepthState,
    /// Reference and target volumes, for diagnostics.
    pub volumes: (Var, Var),
}

impl ForwardOutput {
    /// Full-resolution predictions in full-index units, one per iteration.
    pub fn history(&self) -> &[Var] {
        &self.state.history
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    features: FeatureNet,
    fusion: VolumeFusion,
    update: UpdateBlock,
}

impl Model {
    /// Fresh randomly initialized network. Parameter creation order is fixed,
    /// so the same seed yields the same weights.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.base_channels;
        let features = FeatureNet::new(&mut store, &mut rng, c, config.feature_blocks);
        let fusion = VolumeFusion::new(&mut store, &mut rng, config.fusion, config.grid_embedding, c);
        let update = UpdateBlock::new(&mut store, &mut rng, c, LOOKUP_RADIUS);
        Ok(Model {
            config: config.clone(),
            store,
            features,
            fusion,
            update,
        })
    }

    pub fn fusion(&self) -> &VolumeFusion {
        &self.fusion
    }

    pub fn update_block(&self) -> &UpdateBlock {
        &self.update
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        geometry: &Geometry,
        images: &[Tensor],
        iterations: usize,
    ) -> Result<ForwardOutput> {
        self.forward_with(g, &self.store, geometry, images, iterations)
    }

    /// Forward pass with an explicit parameter store (same layout as `self.store`).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        geometry: &Geometry,
        images: &[Tensor],
        iterations: usize,
    ) -> Result<ForwardOutput> {
        if images.len() != 4 {
            return Err(Error::InvalidInput(format!("expected 4 images, got {}", images.len())));
        }
        let (w, h) = geometry.image_size();
        let mut vols = Vec::with_capacity(4);
        for (img, grids) in images.iter().zip(&geometry.grids) {
            if img.shape() != [3, h, w] {
                return Err(Error::shape("forward image", &[3, h, w], img.shape()));
            }
            let x = g.constant(img.clone());
            let f = self.features.extract(g, store, x)?;
            vols.push(warp_features(g, f, grids)?);
        }
        let vols = [vols[0], vols[1], vols[2], vols[3]];
        let embeds = if self.fusion.uses_grid_embedding() {
            let e: Vec<Var> = geometry
                .grids
                .iter()
                .map(|gr| g.constant(gr.grid_embed.clone()))
                .collect();
            Some([e[0], e[1], e[2], e[3]])
        } else {
            None
        };
        let layout = match (&geometry.layout, self.fusion.mode()) {
            (Some(l), _) => l.clone(),
            (None, FusionMode::Interleave) => {
                return Err(Error::Config(
                    "interleave fusion needs sweep.out_width / 2 divisible by 4".into(),
                ))
            }
            (None, _) => InterleaveLayout {
                reference: vec![],
                target: vec![],
            },
        };
        let (s_ref, s_tgt) = self.fusion.fuse(g, store, &vols, embeds.as_ref(), &layout)?;
        let ctx = init_context(g, s_ref, self.config.adaptive_context);
        let corr = correlation_volume(g, s_ref, s_tgt)?;
        let pyramid = build_pyramid(g, corr)?;
        let state = self.update.run_iterations(g, store, &pyramid, ctx, iterations)?;
        Ok(ForwardOutput {
            state,
            volumes: (s_ref, s_tgt),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::projection;

    fn micro() -> (Geometry, ModelConfig) {
        let rig = RigCalibration::default_rig().with_resolution(16, 16);
        let sweep = SweepConfig {
            num_spheres: 16,
            out_width: 16,
            out_height: 8,
            ..SweepConfig::default()
        };
        let cfg = ModelConfig {
            base_channels: 2,
            feature_blocks: 1,
            iterations: 2,
            ..ModelConfig::default()
        };
        (Geometry::new(&rig, &sweep, None).unwrap(), cfg)
    }

    fn images() -> Vec<Tensor> {
        (0..4)
            .map(|i| projection(&[3, 16, 16], i).map(|v| 0.5 + 0.5 * v))
            .collect()
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let (geo, cfg) = micro();
        for mode in FusionMode::ALL {
            let cfg = ModelConfig {
                fusion: mode,
                ..cfg.clone()
            };
            let model = Model::new(&cfg, 1).unwrap();
            let run = || {
                let mut g = Graph::new();
                let out = model.forward(&mut g, &geo, &images(), 2).unwrap();
                assert_eq!(out.history().len(), 2);
                assert_eq!(g.shape(out.history()[1]), &[8, 16]);
                g.value(out.history()[1]).clone()
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let (_, cfg) = micro();
        let a = Model::new(&cfg, 4).unwrap();
        let b = Model::new(&cfg, 4).unwrap();
        let c = Model::new(&cfg, 5).unwrap();
        let flat = |m: &Model| {
            m.store
                .iter()
                .flat_map(|(_, _, t)| t.data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn sphere_count_must_allow_pyramid() {
        let rig = RigCalibration::default_rig().with_resolution(16, 16);
        let sweep = SweepConfig {
            num_spheres: 24,
            out_width: 16,
            out_height: 8,
            ..SweepConfig::default()
        };
        assert!(matches!(Geometry::new(&rig, &sweep, None), Err(Error::Config(_))));
    }
}
