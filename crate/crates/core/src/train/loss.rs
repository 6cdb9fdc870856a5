//! Exponentially weighted sequence loss over the refinement history.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `γ^(M−i)` for `i = 1..=M`; the last entry is exactly 1.
pub fn loss_weights(iterations: usize, gamma: f64) -> Vec<f64> {
    (1..=iterations).map(|i| gamma.powi((iterations - i) as i32)).collect()
}

fn check_target(pred_shape: &[usize], gt: &Tensor, mask: &[bool]) -> Result<usize> {
    if pred_shape != gt.shape() {
        return Err(Error::shape("sequence_loss", gt.shape(), pred_shape));
    }
    if mask.len() != gt.len() {
        return Err(Error::shape("sequence_loss mask", &[gt.len()], &[mask.len()]));
    }
    if !gt.all_finite() {
        return Err(Error::InvalidInput("ground truth contains non-finite values".into()));
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::EmptyMask),
        n => Ok(n),
    }
}

/// Mean absolute error over masked pixels.
pub fn masked_l1(g: &mut Graph, pred: Var, gt: &Tensor, mask: &[bool]) -> Result<Var> {
    sequence_loss(g, &[pred], gt, mask, 1.0)
}

/// `Σ_i γ^(M−i) · mean_valid |pred_i − gt|`.
pub fn sequence_loss(g: &mut Graph, history: &[Var], gt: &Tensor, mask: &[bool], gamma: f64) -> Result<Var> {
    if history.is_empty() {
        return Err(Error::InvalidInput(
            "sequence_loss needs at least one prediction".into(),
        ));
    }
    let mut count = 0;
    for &p in history {
        count = check_target(g.shape(p), gt, mask)?;
    }
    let weights = loss_weights(history.len(), gamma);
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (&p, w) in history.iter().zip(&weights) {
        let pred = g.value(p).data();
        let sum: f64 = (0..pred.len())
            .filter(|&i| mask[i])
            .map(|i| (pred[i] - gt.data()[i]).abs())
            .sum();
        total += w * sum * inv;
    }
    let gt = gt.clone();
    let mask = mask.to_vec();
    Ok(g.custom(history, Tensor::scalar(total), move |args| {
        let up = args.grad.item();
        args.inputs
            .iter()
            .zip(&weights)
            .zip(args.needs)
            .map(|((pred, w), &need)| {
                need.then(|| {
                    let k = up * w * inv;
                    Tensor::from_fn(pred.shape(), |i| {
                        let e = pred.data()[i] - gt.data()[i];
                        match mask[i] {
                            true if e > 0.0 => k,
                            true if e < 0.0 => -k,
                            _ => 0.0,
                        }
                    })
                })
            })
            .collect()
    }))
}
