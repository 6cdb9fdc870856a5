//! Inverse-index error metrics in raw index units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Percent of valid pixels with error above 1, 3 and 5 indices.
    pub gt1: f64,
    pub gt3: f64,
    pub gt5: f64,
    pub mae: f64,
    pub rms: f64,
    pub pixels: usize,
}

pub fn metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<MetricsRecord> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::shape("metrics", &[gt.len()], &[pred.len(), mask.len()]));
    }
    let (mut n, mut over1, mut over3, mut over5) = (0usize, 0usize, 0usize, 0usize);
    let (mut abs, mut sq) = (0.0, 0.0);
    for i in (0..gt.len()).filter(|&i| mask[i]) {
        let e = (pred[i] - gt[i]).abs();
        n += 1;
        over1 += (e > 1.0) as usize;
        over3 += (e > 3.0) as usize;
        over5 += (e > 5.0) as usize;
        abs += e;
        sq += e * e;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Ok(MetricsRecord {
        gt1: pct(over1),
        gt3: pct(over3),
        gt5: pct(over5),
        mae: abs / n as f64,
        rms: (sq / n as f64).sqrt(),
        pixels: n,
    })
}

/// Pixel-weighted combination, as if every pixel of every record were pooled.
pub fn aggregate(records: &[MetricsRecord]) -> Result<MetricsRecord> {
    let n: usize = records.iter().map(|r| r.pixels).sum();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mean =
        |f: &dyn Fn(&MetricsRecord) -> f64| records.iter().map(|r| f(r) * r.pixels as f64).sum::<f64>() / n as f64;
    Ok(MetricsRecord {
        gt1: mean(&|r| r.gt1),
        gt3: mean(&|r| r.gt3),
        gt5: mean(&|r| r.gt5),
        mae: mean(&|r| r.mae),
        rms: mean(&|r| r.rms * r.rms).sqrt(),
        pixels: n,
    })
}
