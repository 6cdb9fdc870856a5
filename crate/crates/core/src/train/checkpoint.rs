//! Single-file checkpoints: config text, rig calibration, weights, optimizer
//! moments and step count in the named-array container.

use std::path::Path;

use crate::camera::RigCalibration;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::container::{ArrayData, NamedArrays};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

use super::optim::AdamW;

const CONFIG_KEY: &str = "__config__";
const RIG_KEY: &str = "__rig__";
const STEP_KEY: &str = "__step__";

pub struct Checkpoint {
    pub config: RunConfig,
    pub rig: RigCalibration,
    pub model: Model,
    pub optimizer: AdamW,
    pub step: usize,
}

pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    rig: &RigCalibration,
    model: &Model,
    optimizer: &AdamW,
    step: usize,
) -> Result<()> {
    let mut arrays = NamedArrays::new();
    arrays.insert_text(CONFIG_KEY, &config.to_json());
    arrays.insert_text(RIG_KEY, &rig.to_json());
    arrays.insert(STEP_KEY, ArrayData::F64(Tensor::scalar(step as f64)));
    for (k, (_, name, t)) in model.store.iter().enumerate() {
        arrays.insert(format!("param.{name}"), ArrayData::F64(t.clone()));
        arrays.insert(format!("adam.m.{name}"), ArrayData::F64(optimizer.m[k].clone()));
        arrays.insert(format!("adam.v.{name}"), ArrayData::F64(optimizer.v[k].clone()));
    }
    let tmp = path.with_extension("tmp");
    arrays.write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let arrays = NamedArrays::read(path)?;
    let config = RunConfig::from_json(&arrays.text(CONFIG_KEY, path)?)?;
    let rig = RigCalibration::from_json(&arrays.text(RIG_KEY, path)?)?;
    let step = arrays.f64(STEP_KEY, path)?.item() as usize;
    let mut model = Model::new(&config.model, config.train.seed)?;
    let mut optimizer = AdamW::new(&model.store, config.train.weight_decay);
    optimizer.step = step as u64;
    let ids: Vec<_> = model.store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let name = model.store.name(id).to_string();
        let expected = model.store.get(id).shape().to_vec();
        let fetch = |key: String| -> Result<Tensor> {
            let t = arrays
                .f64(&key, path)
                .map_err(|_| Error::Incompatible(format!("{}: missing `{key}`", path.display())))?;
            if t.shape() != expected.as_slice() {
                return Err(Error::Incompatible(format!(
                    "{}: `{key}` has shape {:?}, model expects {expected:?}",
                    path.display(),
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        *model.store.get_mut(id) = fetch(format!("param.{name}"))?;
        optimizer.m[k] = fetch(format!("adam.m.{name}"))?;
        optimizer.v[k] = fetch(format!("adam.v.{name}"))?;
    }
    Ok(Checkpoint {
        config,
        rig,
        model,
        optimizer,
        step,
    })
}

/// Architectures must agree in everything but the iteration count, which is
/// free to change at inference time.
pub fn check_compatible(saved: &ModelConfig, requested: &ModelConfig) -> Result<()> {
    let normalized = ModelConfig {
        iterations: saved.iterations,
        ..requested.clone()
    };
    if normalized != *saved {
        return Err(Error::Incompatible(format!(
            "checkpoint model {} does not match requested {}",
            serde_json::to_string(saved).expect("serializes"),
            serde_json::to_string(requested).expect("serializes"),
        )));
    }
    Ok(())
}
