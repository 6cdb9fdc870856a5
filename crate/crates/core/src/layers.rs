//! Parameterized layers on top of the autograd graph.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform with variance `1 / fan_in`; biases zero.
    LeCun,
    /// Weights and biases zero.
    Zero,
}

fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::LeCun => {
            let bound = (3.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        init: Init,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[cout, cin, k, k], fan_in, init, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.spec)
    }

    pub fn in_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[1]
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }
}

/// Affine map over the last axis of a channel-last volume (a 1×1 convolution).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, init: Init) -> Self {
        let weight = store.add(format!("{name}.weight"), init_tensor(&[cin, cout], cin, init, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear_last(x, w, b)
    }

    pub fn in_features(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn out_features(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[1]
    }
}
