//! The training loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Geometry, Model};
use crate::synth::{Dataset, Sample, Split};
use crate::tensor::Tensor;

use super::checkpoint::{check_compatible, load_checkpoint, save_checkpoint};
use super::loss::sequence_loss;
use super::optim::{clip_global_norm, AdamW, OneCycle};

pub const CHECKPOINT_FILE: &str = "checkpoint.rsg";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Grid cache directory.
    pub cache_dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps, writing a checkpoint, without
    /// changing the schedule.
    pub stop_at: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Loss at every step run by this call.
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub steps: usize,
}

#[derive(Serialize)]
struct LogLine {
    step: usize,
    scenes: Vec<usize>,
    loss: f64,
    lr: f64,
    grad_norm: f64,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    step: usize,
    scene: usize,
    lr: f64,
    error: String,
    param_norms: BTreeMap<&'a str, f64>,
}

/// Position `k` of the endless shuffled stream of sample indices. Each epoch
/// is a fresh permutation drawn from `(seed, epoch)`.
pub fn sample_index(seed: u64, k: usize, n: usize) -> usize {
    let (epoch, pos) = (k / n, k % n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order[pos]
}

/// Ground truth as a `[H, W]` tensor.
pub fn gt_tensor(sample: &Sample) -> Tensor {
    Tensor::from_vec(&[sample.height, sample.width], sample.gt.clone())
}

/// The dataset and the configuration must agree on the sweep; the dataset's
/// own rig is used for geometry.
pub fn dataset_geometry(cfg: &RunConfig, dataset: &Dataset, cache_dir: Option<&Path>) -> Result<Geometry> {
    if dataset.manifest.sweep != cfg.sweep {
        return Err(Error::Config(format!(
            "dataset {} was generated with a different sweep configuration",
            dataset.root.display()
        )));
    }
    Geometry::new(&dataset.rig, &dataset.manifest.sweep, cache_dir)
}

fn write_diagnostic(out_dir: &Path, model: &Model, step: usize, scene: usize, lr: f64, err: &Error) {
    let diag = Diagnostic {
        step,
        scene,
        lr,
        error: err.to_string(),
        param_norms: model.store.iter().map(|(_, n, t)| (n, t.sum_sq().sqrt())).collect(),
    };
    let path = out_dir.join(DIAGNOSTIC_FILE);
    let text = serde_json::to_string_pretty(&diag).expect("diagnostic serializes");
    if let Err(e) = fs::write(&path, text) {
        log::error!("could not write {}: {e}", path.display());
    }
}

/// Loss and per-parameter gradients for one scene.
fn scene_gradients(
    model: &Model,
    geometry: &Geometry,
    sample: &Sample,
    gamma: f64,
    scale: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, geometry, &sample.images, model.config.iterations)?;
    let loss = sequence_loss(&mut g, out.history(), &gt_tensor(sample), &sample.mask, gamma)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NumericFailure {
            iteration: model.config.iterations,
            what: format!("loss is {value}"),
        });
    }
    let grads = g.backward(loss);
    let mut out: Vec<Tensor> = model.store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    for (id, gr) in grads.params() {
        out[id.index()] = gr.map(|v| v * scale);
    }
    Ok((value, out))
}

pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let dataset = Dataset::open(&cfg.data.dir)?;
    let geometry = dataset_geometry(cfg, &dataset, opts.cache_dir.as_deref())?;
    let samples = dataset.load_split(Split::Train)?;
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} has no training scenes",
            dataset.root.display()
        )));
    }
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;

    let t = &cfg.train;
    let (mut model, mut opt, start) = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            check_compatible(&ck.config.model, &cfg.model)?;
            let mut model = ck.model;
            model.config = cfg.model.clone();
            (model, ck.optimizer, ck.step)
        }
        None => {
            let model = Model::new(&cfg.model, t.seed)?;
            let opt = AdamW::new(&model.store, t.weight_decay);
            (model, opt, 0)
        }
    };
    opt.weight_decay = t.weight_decay;
    let schedule = OneCycle::new(t.max_lr, t.steps, t.warmup_fraction);
    let ckpt_path = opts.out_dir.join(CHECKPOINT_FILE);
    let log_path = opts.out_dir.join(LOG_FILE);
    let mut log_text = match (&opts.resume, fs::read_to_string(&log_path)) {
        (Some(_), Ok(text)) => text,
        _ => String::new(),
    };
    let mut losses = Vec::new();
    log::info!(
        "training {} parameters on {} scenes for {} steps",
        model.store.num_scalars(),
        samples.len(),
        t.steps
    );

    let end = opts.stop_at.map_or(t.steps, |s| s.min(t.steps));
    for step in start..end {
        let lr = schedule.lr(step);
        let mut grads: Option<Vec<Tensor>> = None;
        let mut loss = 0.0;
        let mut scenes = Vec::with_capacity(t.batch_size);
        for b in 0..t.batch_size {
            let idx = sample_index(t.seed, step * t.batch_size + b, samples.len());
            let sample = &samples[idx];
            scenes.push(sample.id);
            let (l, gr) = scene_gradients(&model, &geometry, sample, t.gamma, 1.0 / t.batch_size as f64)
                .inspect_err(|e| write_diagnostic(&opts.out_dir, &model, step, sample.id, lr, e))?;
            loss += l / t.batch_size as f64;
            match &mut grads {
                Some(acc) => acc.iter_mut().zip(&gr).for_each(|(a, g)| a.add_assign(g)),
                None => grads = Some(gr),
            }
        }
        let mut grads = grads.expect("batch_size >= 1");
        let grad_norm = clip_global_norm(&mut grads, t.clip_norm);
        opt.update(&mut model.store, &grads, lr);
        losses.push(loss);
        let line = LogLine {
            step,
            scenes,
            loss,
            lr,
            grad_norm,
        };
        log_text.push_str(&serde_json::to_string(&line).expect("log serializes"));
        log_text.push('\n');
        if t.log_every > 0 && (step % t.log_every == 0 || step + 1 == t.steps) {
            log::info!("step {step:>6}  loss {loss:.4}  lr {lr:.2e}  |g| {grad_norm:.3}");
        }
        let done = step + 1;
        if done == end || (t.checkpoint_every > 0 && done % t.checkpoint_every == 0) {
            save_checkpoint(&ckpt_path, cfg, &dataset.rig, &model, &opt, done)?;
            fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
        }
    }
    if start >= end {
        save_checkpoint(&ckpt_path, cfg, &dataset.rig, &model, &opt, start)?;
    }
    Ok(TrainReport {
        losses,
        checkpoint: ckpt_path,
        steps: end.max(start),
    })
}
