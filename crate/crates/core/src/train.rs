//! Mini-batch Adam training with best-on-validation model selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, cross_entropy, forward_with, BackwardRequest, ModelConfig, Params};
use crate::preprocess::{preprocess, WindowSetting};
use crate::store::{LesionAnnotation, ManifestFile};
use crate::tensor::{Dims, Volume};

fn default_decay() -> f64 {
    0.85
}

fn default_decay_every() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// Learning-rate multiplier applied every `decay_every` epochs.
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// 100 epochs, learning rate 1e-4, batch 16.
    pub fn paper() -> Self {
        Self {
            epochs: 100,
            lr0: 1e-4,
            decay: default_decay(),
            decay_every: default_decay_every(),
            batch_size: 16,
            seed: 0,
        }
    }

    /// 30 epochs, batch 8, and a larger step for the narrow desk model.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            lr0: 1e-3,
            batch_size: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::invalid("epochs, batch_size and decay_every must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        Ok(())
    }

    /// Step schedule: `lr0 · decay^⌊epoch / decay_every⌋` (epoch is 0-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// One preprocessed case held in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub case_id: String,
    pub input: Volume,
    pub label: u8,
    pub lesions: Vec<LesionAnnotation>,
    /// Shape of the original CT volume (lesion coordinates refer to it).
    pub ct_dims: Dims,
}

/// Reads and preprocesses every case of a manifest.
pub fn load_samples(manifest: &ManifestFile, input_shape: Dims, window: WindowSetting) -> Result<Vec<Sample>> {
    manifest
        .manifest
        .entries
        .par_iter()
        .map(|entry| {
            let (ct, meta, mask) = manifest.read_case(entry)?;
            let lung = preprocess(&ct, &meta, &mask, window, input_shape)?;
            Ok(Sample {
                case_id: entry.case_id.clone(),
                input: lung.data,
                label: entry.label,
                lesions: entry.lesions.clone(),
                ct_dims: ct.dims(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Params,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub log: Vec<EpochLog>,
}

struct Adam {
    m: Params,
    v: Params,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-7;

impl Adam {
    fn new(config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            m: Params::zeros(config)?,
            v: Params::zeros(config)?,
            step: 0,
        })
    }

    fn update(&mut self, params: &mut Params, grad: &Params, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let views = params.views_mut();
        let ms = self.m.views_mut();
        let vs = self.v.views_mut();
        for (((p, g), m), v) in views.into_iter().zip(grad.views()).zip(ms).zip(vs) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
                v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
                p.data[i] -= lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + EPSILON);
            }
        }
    }
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: Option<Params>,
}

fn run_sample(params: &Params, config: &ModelConfig, s: &Sample, with_grads: bool) -> Result<SampleResult> {
    let stack = forward_with(&s.input, params, config, None)?;
    let (loss, dlogits) = cross_entropy(&stack, s.label);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss on case {}", s.case_id)));
    }
    let grads = if with_grads {
        let req = BackwardRequest {
            param_grads: true,
            capture: Vec::new(),
        };
        backward(params, config, &stack, dlogits, &req)?.params
    } else {
        None
    };
    Ok(SampleResult {
        loss,
        correct: stack.predicted_class == s.label,
        grads,
    })
}

/// Mean loss and accuracy over a set of cases.
pub fn evaluate_loss(params: &Params, config: &ModelConfig, samples: &[Sample]) -> Result<(f64, f64)> {
    let results: Vec<SampleResult> = samples
        .par_iter()
        .map(|s| run_sample(params, config, s, false))
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    Ok((
        results.iter().map(|r| r.loss).sum::<f64>() / n,
        results.iter().filter(|r| r.correct).count() as f64 / n,
    ))
}

/// Trains from `Params::init(model)`. The batch order is seeded by
/// `cfg.seed` and per-sample gradients are summed in batch order, so the
/// result does not depend on the thread count.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let mut params = Params::init(model)?;
    let mut adam = Adam::new(model)?;
    let mut best: Option<(Params, usize, f64)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<SampleResult> = batch
                .par_iter()
                .map(|&i| run_sample(&params, model, &train_set[i], true))
                .collect::<Result<_>>()?;
            let mut grad = Params::zeros(model)?;
            let scale = 1.0 / batch.len() as f64;
            for r in &results {
                loss_sum += r.loss;
                correct += usize::from(r.correct);
                grad.add_scaled(r.grads.as_ref().expect("requested"), scale);
            }
            adam.update(&mut params, &grad, lr);
            if !params.all_finite() {
                return Err(Error::NonFinite(format!("parameters after an update in epoch {}", epoch + 1)));
            }
        }

        let (val_loss, val_accuracy) = evaluate_loss(&params, model, val_set)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss,
            val_accuracy,
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().map_or(true, |b| val_accuracy > b.2) {
            best = Some((params.clone(), epoch + 1, val_accuracy));
        }
    }
    let (params, best_epoch, best_val_accuracy) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        best_val_accuracy,
        log,
    })
}

pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in log {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
