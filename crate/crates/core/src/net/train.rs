//! Joint training of backbone and exit heads.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MultiExitModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{argmax, softmax_cross_entropy_batch, Sgd, Tensor};

const CROP_PAD: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    /// Epochs (0-based) from which the learning rate is multiplied by
    /// `lr_decay` once more.
    pub decay_epochs: Vec<usize>,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Per-exit loss weights; `None` means the default cost-fraction ramp.
    pub exit_weights: Option<Vec<f64>>,
    /// Random crop and horizontal flip.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            momentum: 0.9,
            lr_decay: 0.1,
            decay_epochs: vec![35, 60, 85],
            batch_size: 128,
            weight_decay: 0.0,
            seed: 0,
            exit_weights: None,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("decay_epochs must be strictly increasing"));
        }
        if let Some(e) = self.decay_epochs.iter().find(|e| **e >= self.epochs) {
            return Err(Error::invalid(format!(
                "decay epoch {e} is not below the epoch count {}",
                self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("lr must be positive and momentum in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn weights_for(&self, cost_table: &[f64]) -> Result<Vec<f64>> {
        match &self.exit_weights {
            Some(w) if w.len() != cost_table.len() => Err(Error::invalid(format!(
                "{} exit weights given for {} exits",
                w.len(),
                cost_table.len()
            ))),
            Some(w) => Ok(w.clone()),
            None => Ok(default_exit_weights(cost_table)),
        }
    }
}

/// Internal exits weighted by their cost fraction, the final exit by 1.
pub fn default_exit_weights(cost_table: &[f64]) -> Vec<f64> {
    let n = cost_table.len();
    cost_table
        .iter()
        .enumerate()
        .map(|(i, c)| if i + 1 == n { 1.0 } else { *c })
        .collect()
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let decays = config.decay_epochs.iter().filter(|e| **e <= epoch).count();
    config.lr * config.lr_decay.powi(decays as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Running per-exit accuracy of the train-mode forward passes.
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self, num_exits: usize) -> String {
        let mut s = String::from("epoch,lr,train_loss");
        for i in 1..=num_exits {
            s.push_str(&format!(",train_acc_{i}"));
        }
        for i in 1..=num_exits {
            s.push_str(&format!(",val_acc_{i}"));
        }
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}", e.epoch, e.lr, e.train_loss));
            for a in &e.train_accuracy {
                s.push_str(&format!(",{a}"));
            }
            for i in 0..num_exits {
                match e.val_accuracy.get(i) {
                    Some(a) => s.push_str(&format!(",{a}")),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Where a batch sits in the training run.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub epoch: usize,
    pub batch: usize,
    pub seed: u64,
}

pub struct StepOutput {
    pub loss: f64,
    /// Aligned with `MultiExitModel::params`.
    pub grads: Vec<Tensor<f32>>,
    /// Per-exit logits of the clean view, for accuracy bookkeeping.
    pub logits: Vec<Tensor<f32>>,
}

/// Loss computed on one (already cropped and flipped) batch.
pub trait BatchLoss {
    fn step(
        &mut self,
        model: &mut MultiExitModel<f32>,
        images: &Tensor<f32>,
        labels: &[usize],
        weights: &[f64],
        ctx: StepContext,
    ) -> Result<StepOutput>;
}

/// Weighted sum of per-exit cross-entropies.
pub struct JointCrossEntropy;

impl BatchLoss for JointCrossEntropy {
    fn step(
        &mut self,
        model: &mut MultiExitModel<f32>,
        images: &Tensor<f32>,
        labels: &[usize],
        weights: &[f64],
        _: StepContext,
    ) -> Result<StepOutput> {
        let (out, cache) = model.forward_train(images)?;
        let mut loss = 0.0;
        let mut grad_logits = Vec::with_capacity(out.logits.len());
        for (logits, w) in out.logits.iter().zip(weights) {
            let (l, _, mut g) = softmax_cross_entropy_batch(logits, labels)?;
            loss += w * l as f64;
            let w = *w as f32;
            g.data_mut().iter_mut().for_each(|v| *v *= w);
            grad_logits.push(g);
        }
        let (_, grads) = model.backward(&cache, &grad_logits)?;
        Ok(StepOutput {
            loss,
            grads,
            logits: out.logits,
        })
    }
}

/// Gather a batch with optional random crop (zero padding of 4) and
/// horizontal flip.
pub fn augment_batch(ds: &Dataset, indices: &[usize], augment: bool, rng: &mut impl Rng) -> Tensor<f32> {
    let mut batch = ds.batch(indices);
    if !augment {
        return batch;
    }
    let [c, h, w] = ds.shape();
    let per = c * h * w;
    let mut buf = vec![0f32; per];
    for img in batch.data_mut().chunks_mut(per) {
        let dy = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
        let dx = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
        let flip = rng.random_bool(0.5);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { w - 1 - x } else { x };
                    let sx = sx0 as isize + dx;
                    buf[(ch * h + y) * w + x] =
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            0.0
                        } else {
                            img[(ch * h + sy as usize) * w + sx as usize]
                        };
                }
            }
        }
        img.copy_from_slice(&buf);
    }
    batch
}

/// Per-exit eval-mode accuracy on a dataset. Batches are evaluated in
/// parallel; results do not depend on the sharding.
pub fn evaluate_accuracy(model: &MultiExitModel<f32>, ds: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let counts = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| -> Result<Vec<usize>> {
            let out = model.forward_all_exits(&ds.batch(chunk))?;
            Ok(out
                .logits
                .iter()
                .map(|l| count_correct(l, chunk.iter().map(|&i| ds.labels[i] as usize)))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0usize; model.num_exits()];
    for c in counts {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    Ok(total
        .into_iter()
        .map(|c| c as f64 / ds.len().max(1) as f64)
        .collect())
}

fn count_correct(logits: &Tensor<f32>, labels: impl Iterator<Item = usize>) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, l)| argmax(row) == *l)
        .count()
}

/// Train with plain weighted cross-entropy at every exit.
pub fn train_joint(
    model: &mut MultiExitModel<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainLog> {
    train_with_loss(model, train, val, config, &mut JointCrossEntropy)
}

/// Shared training loop: seeded shuffling, crop/flip augmentation, step
/// learning-rate schedule and momentum SGD around an arbitrary batch loss.
pub fn train_with_loss(
    model: &mut MultiExitModel<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    loss_fn: &mut dyn BatchLoss,
) -> Result<TrainLog> {
    config.validate()?;
    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok(log);
    }
    if train.shape() != model.input_shape || train.num_classes != model.num_classes {
        return Err(Error::invalid(format!(
            "dataset {:?} with {} classes does not fit a model for {:?} with {} classes",
            train.shape(),
            train.num_classes,
            model.input_shape,
            model.num_classes
        )));
    }
    if train.len() < 2 {
        return Err(Error::invalid("training needs at least two samples"));
    }
    let weights = config.weights_for(&model.cost_table)?;
    if model.input_norm.is_none() {
        model.input_norm = Some(train.channel_stats());
    }
    let mut sgd = Sgd::new(config.momentum as f32);
    let n_exits = model.num_exits();
    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        let mut rng: ChaCha8Rng = seed::rng(config.seed, &["epoch".into(), epoch.into()]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut correct = vec![0usize; n_exits];
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            // batch statistics are undefined for a single sample
            if chunk.len() < 2 {
                continue;
            }
            let images = augment_batch(train, chunk, config.augment, &mut rng);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i] as usize).collect();
            let ctx = StepContext {
                epoch,
                batch: b,
                seed: config.seed,
            };
            let mut out = loss_fn.step(model, &images, &labels, &weights, ctx)?;
            if !out.loss.is_finite() || out.grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: out.loss,
                });
            }
            if config.weight_decay > 0.0 {
                let wd = config.weight_decay as f32;
                for (g, p) in out.grads.iter_mut().zip(model.params()) {
                    for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
                        *gv += wd * pv;
                    }
                }
            }
            sgd.step(model.params_mut(), &out.grads, lr as f32)?;
            loss_sum += out.loss * chunk.len() as f64;
            seen += chunk.len();
            for (c, l) in correct.iter_mut().zip(&out.logits) {
                *c += count_correct(l, labels.iter().copied());
            }
        }
        let seen_f = seen.max(1) as f64;
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => evaluate_accuracy(model, v, 256)?,
            _ => Vec::new(),
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / seen_f,
            train_accuracy: correct.iter().map(|c| *c as f64 / seen_f).collect(),
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.4} loss {:.4} final-exit train acc {:.3}",
            entry.train_loss,
            entry.train_accuracy.last().copied().unwrap_or(0.0)
        );
        log.epochs.push(entry);
    }
    Ok(log)
}
