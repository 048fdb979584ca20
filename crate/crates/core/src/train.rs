//! Shared training plumbing: mini-batch order, per-epoch log records and
//! plain cross-entropy fitting of a single-backbone model.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::losses::{argmax_rows, cross_entropy};
use crate::model::{Classifier, SingleModel};
use crate::optim::{cosine_lr, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clipping; `None` disables it.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(
                "need lr ≥ 0, weight_decay ≥ 0 and momentum in [0, 1)".into(),
            ));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidArgument("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One JSON-lines record per training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub session: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_la: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_fe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_kd: Option<f64>,
    pub train_acc: f64,
}

/// Shuffled mini-batches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// SplitMix64-style derivation of independent sub-seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn accuracy(model: &impl Classifier, data: &LabeledSet) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = argmax_rows(model.logits(data.x.view())?.view());
    let hits = pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Cross-entropy training of `model` on `data`. The first `frozen_columns`
/// classifier columns are held fixed (bit-exact) throughout.
pub fn fit_supervised(
    model: &mut SingleModel,
    data: &LabeledSet,
    cfg: &TrainConfig,
    frozen_columns: usize,
    seed: u64,
    stage: &str,
    session: usize,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("{stage}: empty training set")));
    }
    let kept = model.classifier.slice(ndarray::s![.., ..frozen_columns]).to_owned();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay).with_clip_norm(cfg.clip_norm);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in epoch_batches(data.len(), cfg.batch_size, seed, epoch) {
            let x = data.x.select(Axis(0), &batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.y[i]).collect();
            let (f, z, tape) = model.forward_train(x.view())?;
            let lg = cross_entropy(z.view(), &y)?;
            hits += argmax_rows(z.view()).iter().zip(&y).filter(|(p, t)| p == t).count();
            loss_sum += lg.loss * batch.len() as f64;
            let mut grad = model.backward(&f, &tape, &lg.grad);
            grad.classifier.slice_mut(ndarray::s![.., ..frozen_columns]).fill(0.0);
            opt.step(lr, model.params_mut(), grad.slices());
            if frozen_columns > 0 {
                model
                    .classifier
                    .slice_mut(ndarray::s![.., ..frozen_columns])
                    .assign(&kept);
            }
        }
        let n = data.len() as f64;
        let loss = loss_sum / n;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("{stage}: loss diverged at epoch {epoch}")));
        }
        logs.push(EpochLog {
            stage: stage.to_string(),
            session,
            epoch,
            lr,
            loss,
            loss_la: None,
            loss_fe: None,
            loss_kd: None,
            train_acc: hits as f64 / n,
        });
    }
    Ok(logs)
}
