//! Held-out evaluation: per-scene and aggregate metrics plus the error of
//! every refinement iteration.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{Geometry, Model};
use crate::synth::Sample;

use super::metrics::{aggregate, metrics, MetricsRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene: usize,
    #[serde(flatten)]
    pub metrics: MetricsRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iterations: usize,
    pub scenes: Vec<SceneRow>,
    pub aggregate: MetricsRecord,
    /// Pixel-weighted MAE of iteration 1..=M over all scenes.
    pub per_iteration_mae: Vec<f64>,
    /// MAE of predicting index 0 everywhere.
    pub zero_baseline_mae: f64,
}

/// Predictions of every iteration, full resolution, clamped to `[0, N − 1]`.
pub fn predict(model: &Model, geometry: &Geometry, sample: &Sample, iterations: usize) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::inference();
    let out = model.forward(&mut g, geometry, &sample.images, iterations)?;
    let top = (geometry.sweep.num_spheres - 1) as f64;
    Ok(out
        .history()
        .iter()
        .map(|&v| g.value(v).data().iter().map(|x| x.clamp(0.0, top)).collect())
        .collect())
}

pub fn evaluate(model: &Model, geometry: &Geometry, samples: &[Sample], iterations: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no scenes to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    let mut iter_abs = vec![0.0; iterations];
    let mut baseline = Vec::with_capacity(samples.len());
    for sample in samples {
        let history = predict(model, geometry, sample, iterations)?;
        for (acc, pred) in iter_abs.iter_mut().zip(&history) {
            let m = metrics(pred, &sample.gt, &sample.mask)?;
            *acc += m.mae * m.pixels as f64;
        }
        let last = history.last().expect("iterations >= 1");
        rows.push(SceneRow {
            scene: sample.id,
            metrics: metrics(last, &sample.gt, &sample.mask)?,
        });
        baseline.push(metrics(&vec![0.0; sample.gt.len()], &sample.gt, &sample.mask)?);
        log::debug!("scene {}: mae {:.4}", sample.id, rows.last().unwrap().metrics.mae);
    }
    let per_scene: Vec<MetricsRecord> = rows.iter().map(|r| r.metrics).collect();
    let agg = aggregate(&per_scene)?;
    Ok(EvalReport {
        iterations,
        scenes: rows,
        per_iteration_mae: iter_abs.iter().map(|s| s / agg.pixels as f64).collect(),
        aggregate: agg,
        zero_baseline_mae: aggregate(&baseline)?.mae,
    })
}
