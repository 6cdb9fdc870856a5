//! Central finite-difference checks for graph gradients.
//!
//! The relative error reported everywhere is
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, NORM_FLOOR)`,
//! computed over all checked coordinates together. The floor keeps gradients
//! that vanish structurally (a bias feeding a normalization) from turning
//! rounding noise into a relative error of 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const NORM_FLOOR: f64 = 1e-5;

/// `Σ x ⊙ w` as a scalar node; turns any output into a loss with a dense gradient.
pub fn weighted_total(g: &mut Graph, x: Var, w: Tensor) -> Var {
    assert_eq!(g.shape(x), w.shape(), "weighted_total shapes");
    let total: f64 = g.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    g.custom(&[x], Tensor::scalar(total), move |a| {
        let s = a.grad.item();
        vec![Some(w.map(|v| v * s))]
    })
}

/// Fixed pseudo-random projection weights in `[-1, 1]`.
pub fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

/// Coordinates to probe: all of them, or an evenly strided subset.
fn probe_indices(len: usize, max_probes: usize) -> Vec<usize> {
    if len <= max_probes {
        (0..len).collect()
    } else {
        (0..max_probes).map(|i| i * len / max_probes).collect()
    }
}

/// Check gradients of a scalar function with respect to each of `inputs`.
/// Returns one relative error per input.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, step: f64, max_probes: usize) -> Vec<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);

    let mut errors = Vec::with_capacity(inputs.len());
    for (k, &v) in vars.iter().enumerate() {
        let probes = probe_indices(inputs[k].len(), max_probes);
        let analytic_full = grads
            .wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut analytic = Vec::with_capacity(probes.len());
        let mut numeric = Vec::with_capacity(probes.len());
        let mut work = inputs.to_vec();
        for &i in &probes {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + step;
            let up = eval(&work);
            work[k].data_mut()[i] = x0 - step;
            let down = eval(&work);
            work[k].data_mut()[i] = x0;
            numeric.push((up - down) / (2.0 * step));
            analytic.push(analytic_full.data()[i]);
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    errors
}

/// Check gradients of a scalar function with respect to every parameter in
/// `store`. Returns `(parameter name, relative error)` pairs.
pub fn check_params<F>(store: &ParamStore, f: F, step: f64, max_probes: usize) -> Vec<(String, f64)>
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss);
    let analytic: std::collections::HashMap<_, _> = grads.params().into_iter().map(|(id, t)| (id, t.clone())).collect();

    let mut work = store.clone();
    let eval = |work: &ParamStore| {
        let mut g = Graph::new();
        let out = f(&mut g, work);
        g.value(out).item()
    };
    let mut out = Vec::new();
    for id in store.ids() {
        let value = store.get(id);
        let probes = probe_indices(value.len(), max_probes);
        let zeros = Tensor::zeros(value.shape());
        let full = analytic.get(&id).unwrap_or(&zeros);
        let mut a = Vec::with_capacity(probes.len());
        let mut n = Vec::with_capacity(probes.len());
        for &i in &probes {
            let x0 = value.data()[i];
            work.get_mut(id).data_mut()[i] = x0 + step;
            let up = eval(&work);
            work.get_mut(id).data_mut()[i] = x0 - step;
            let down = eval(&work);
            work.get_mut(id).data_mut()[i] = x0;
            n.push((up - down) / (2.0 * step));
            a.push(full.data()[i]);
        }
        out.push((store.name(id).to_string(), relative_error(&a, &n)));
    }
    out
}
