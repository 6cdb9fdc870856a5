//! Shared unary feature extractor applied to every fisheye image.
//!
//! Stride-2 7×7 stem to C channels, a stack of residual blocks at half
//! resolution, and a final 3×3 projection. Instance normalization keeps
//! single-image batches stable.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Graph, Padding, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Init};

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

#[derive(Clone, Debug)]
pub struct FeatureNet {
    channels: usize,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    proj: Conv2d,
}

impl FeatureNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, blocks: usize) -> Self {
        let same3 = ConvSpec::same(3, Padding::Zero);
        let stem = Conv2d::new(
            store,
            rng,
            "feature.stem",
            3,
            channels,
            7,
            ConvSpec {
                stride: 2,
                pad: 3,
                padding: Padding::Zero,
            },
            Init::LeCun,
        );
        let blocks = (0..blocks)
            .map(|i| ResBlock {
                a: Conv2d::new(
                    store,
                    rng,
                    &format!("feature.block{i}.a"),
                    channels,
                    channels,
                    3,
                    same3,
                    Init::LeCun,
                ),
                b: Conv2d::new(
                    store,
                    rng,
                    &format!("feature.block{i}.b"),
                    channels,
                    channels,
                    3,
                    same3,
                    Init::LeCun,
                ),
            })
            .collect();
        let proj = Conv2d::new(store, rng, "feature.proj", channels, channels, 3, same3, Init::LeCun);
        FeatureNet {
            channels,
            stem,
            blocks,
            proj,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `image: [3, h, w]` with values in `[0, 1]` → `[C, h/2, w/2]`.
    pub fn extract(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::InvalidInput(format!("image must be [3, h, w], got {s:?}")));
        }
        if !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) || s[1] == 0 || s[2] == 0 {
            return Err(Error::InvalidInput(format!(
                "image size {}x{} must be even",
                s[2], s[1]
            )));
        }
        let x = self.stem.forward(g, store, image);
        let x = g.instance_norm(x);
        let mut x = g.relu(x);
        for block in &self.blocks {
            let y = block.a.forward(g, store, x);
            let y = g.instance_norm(y);
            let y = g.relu(y);
            let y = block.b.forward(g, store, y);
            let y = g.instance_norm(y);
            let sum = g.add(x, y);
            x = g.relu(sum);
        }
        Ok(self.proj.forward(g, store, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn net(c: usize, blocks: usize) -> (ParamStore, FeatureNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = FeatureNet::new(&mut store, &mut rng, c, blocks);
        (store, net)
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f64>())
    }

    #[test]
    fn shape_contract() {
        let (store, net) = net(4, 6);
        let mut g = Graph::new();
        let img = g.constant(noise(&[3, 64, 64], 1));
        let f = net.extract(&mut g, &store, img).unwrap();
        assert_eq!(g.shape(f), &[4, 32, 32]);
    }

    #[test]
    fn shared_weights_identical_outputs() {
        let (store, net) = net(4, 2);
        let mut g = Graph::new();
        let img = noise(&[3, 16, 24], 2);
        let a = g.constant(img.clone());
        let b = g.constant(img);
        let fa = net.extract(&mut g, &store, a).unwrap();
        let fb = net.extract(&mut g, &store, b).unwrap();
        assert_eq!(g.value(fa), g.value(fb));
    }

    #[test]
    fn odd_dimensions_rejected() {
        let (store, net) = net(2, 1);
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[3, 15, 16]));
        assert!(matches!(net.extract(&mut g, &store, img), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn two_pixel_shift_moves_output_one_pixel() {
        // compare away from the padded border, whose effect reaches one pixel per conv
        let (store, net) = net(3, 2);
        let (h, w) = (64, 64);
        let patch = noise(&[3, 8, 8], 9);
        let place = |oy: usize, ox: usize| {
            let mut t = Tensor::zeros(&[3, h, w]);
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        t.data_mut()[(c * h + oy + y) * w + ox + x] = patch.data()[(c * 8 + y) * 8 + x];
                    }
                }
            }
            t
        };
        let mut g = Graph::new();
        let a = g.constant(place(28, 28));
        let b = g.constant(place(30, 30));
        let fa = net.extract(&mut g, &store, a).unwrap();
        let fb = net.extract(&mut g, &store, b).unwrap();
        let (va, vb) = (g.value(fa), g.value(fb));
        let (hh, ww) = (h / 2, w / 2);
        let mut max = 0.0f64;
        for c in 0..3 {
            for y in 6..hh - 7 {
                for x in 6..ww - 7 {
                    let pa = va.data()[(c * hh + y) * ww + x];
                    let pb = vb.data()[(c * hh + y + 1) * ww + x + 1];
                    max = max.max((pa - pb).abs());
                }
            }
        }
        assert!(max < 1e-9, "max diff {max}");
    }
}
