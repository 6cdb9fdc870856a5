//! AdamW with a one-cycle learning-rate schedule and global-norm clipping.

use std::f64::consts::PI;

use crate::autograd::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
/// Initial learning rate is `max_lr / DIV_FACTOR`.
pub const DIV_FACTOR: f64 = 25.0;
/// Final learning rate is the initial one divided by this.
pub const FINAL_DIV_FACTOR: f64 = 1e4;

/// Linear warmup then cosine decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = ((total_steps as f64 * warmup_fraction).round() as usize).max(1);
        OneCycle {
            max_lr,
            total_steps,
            warmup_steps,
        }
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / DIV_FACTOR
    }

    pub fn final_lr(&self) -> f64 {
        self.initial_lr() / FINAL_DIV_FACTOR
    }

    /// Rate for zero-based step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let (lo, hi, end) = (self.initial_lr(), self.max_lr, self.final_lr());
        if step < self.warmup_steps {
            return lo + (hi - lo) * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps + 1).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        end + (hi - end) * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

/// Decoupled weight decay Adam. Moment buffers line up with the parameter
/// store by id.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            weight_decay,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update with `grads[i]` for parameter `i`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, &g) in grads[k].data().iter().enumerate() {
                p[i] -= lr * self.weight_decay * p[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = OneCycle::new(5e-4, 1000, 0.05);
        assert_eq!(s.warmup_steps, 50);
        assert!((s.lr(0) - 2e-5).abs() < 1e-18);
        assert!((s.lr(50) - 5e-4).abs() < 1e-18);
        assert!((s.lr(999) - 2e-9).abs() < 1e-18);
        assert!(s.lr(25) > s.lr(10) && s.lr(600) < s.lr(300));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![
            Tensor::from_vec(&[2], vec![3.0, 0.0]),
            Tensor::from_vec(&[1], vec![4.0]),
        ];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::from_vec(&[1], vec![0.5])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.5);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut opt = AdamW::new(&store, 0.0);
        opt.update(&mut store, &[Tensor::from_vec(&[2], vec![0.3, -2.0])], 0.1);
        let p = store.iter().next().unwrap().2.data().to_vec();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(&[1], vec![2.0]));
        let mut opt = AdamW::new(&store, 0.5);
        opt.update(&mut store, &[Tensor::zeros(&[1])], 0.1);
        assert!((store.iter().next().unwrap().2.data()[0] - 1.9).abs() < 1e-12);
    }
}
