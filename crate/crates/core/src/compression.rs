//! Feature compression: distil the boosted two-branch model into a fresh
//! single backbone with class-balanced distillation, mixing old exemplars
//! within each batch.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{argmax_rows, bkd_weights, loss_bkd};
use crate::model::{Classifier, CompositeModel, SingleModel};
use crate::optim::{cosine_lr, Sgd};
use crate::task_stream::SessionData;
use crate::train::{epoch_batches, mix_seed, EpochLog, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub train: TrainConfig,
    pub beta: f64,
    pub temperature: f64,
    /// Reweight the teacher distribution by inverse effective numbers; when
    /// false this is plain distillation.
    pub balanced: bool,
    /// Initialize the student backbone from the frozen old branch instead of
    /// from scratch.
    pub warm_start: bool,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            train: TrainConfig {
                weight_decay: 0.0,
                ..TrainConfig::default()
            },
            beta: 0.97,
            temperature: 2.0,
            balanced: true,
            warm_start: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            alpha: 0.5,
            enabled: true,
        }
    }
}

/// `λ·a + (1 − λ)·b`.
pub fn mix(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>, lambda: f64) -> ndarray::Array1<f64> {
    a.mapv(|v| lambda * v) + b.mapv(|v| (1.0 - lambda) * v)
}

/// A batch with mixed samples appended after the originals.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub x: Array2<f64>,
    /// Rows `0..num_original` are the untouched input batch.
    pub num_original: usize,
    /// `(i, j, λ)` per appended row, indices into the original batch.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Appends one convex combination per old-class row of the batch, pairing
/// each with its successor in a random cyclic order (so no row is paired
/// with itself). `λ ~ Beta(α, α)` per mixed row. Mixed rows carry no label.
pub fn mixup_old(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    num_old: usize,
    cfg: &MixupConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MixedBatch> {
    let plain = MixedBatch {
        x: x.to_owned(),
        num_original: x.nrows(),
        pairs: Vec::new(),
    };
    if !cfg.enabled {
        return Ok(plain);
    }
    if !(cfg.alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mixup alpha must be positive, got {}",
            cfg.alpha
        )));
    }
    let mut old: Vec<usize> = (0..y.len()).filter(|&i| y[i] < num_old).collect();
    if old.len() < 2 {
        log::debug!("mixup skipped: {} old exemplars in batch", old.len());
        return Ok(plain);
    }
    old.shuffle(rng);
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let k = old.len();
    let pairs: Vec<(usize, usize, f64)> = (0..k).map(|p| (old[p], old[(p + 1) % k], beta.sample(rng))).collect();
    let mut out = Array2::zeros((x.nrows() + k, x.ncols()));
    out.slice_mut(ndarray::s![..x.nrows(), ..]).assign(&x);
    for (r, &(i, j, lambda)) in pairs.iter().enumerate() {
        out.row_mut(x.nrows() + r).assign(&mix(x.row(i), x.row(j), lambda));
    }
    Ok(MixedBatch {
        x: out,
        num_original: x.nrows(),
        pairs,
    })
}

/// Per-class counts of `D_t ∪ V_t`, indexed by positional label.
pub fn session_counts(session: &SessionData) -> Vec<usize> {
    (0..session.num_seen())
        .map(|c| session.class_counts.get(&c).copied().unwrap_or(0))
        .collect()
}

pub fn train_compression(
    session: &SessionData,
    teacher: &CompositeModel,
    cfg: &CompressionConfig,
    mixup: &MixupConfig,
    seed: u64,
) -> Result<(SingleModel, Vec<EpochLog>)> {
    cfg.train.validate()?;
    let classes = teacher.num_classes();
    if classes != session.num_seen() {
        return Err(Error::Protocol(format!(
            "teacher covers {classes} classes, session {} has {}",
            session.t,
            session.num_seen()
        )));
    }
    let weights = if cfg.balanced {
        bkd_weights(&session_counts(session), cfg.beta)?
    } else {
        vec![1.0; classes]
    };
    let mut student = SingleModel::new(&teacher.new_branch.config(), classes, seed);
    if cfg.warm_start {
        student.backbone = teacher.old_branch.clone();
        student.backbone.frozen = false;
    }
    let data = &session.combined;
    let tc = &cfg.train;
    let mut opt = Sgd::new(tc.momentum, tc.weight_decay).with_clip_norm(tc.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6d69_7875));
    let mut logs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = cosine_lr(tc.lr, epoch, tc.epochs);
        let (mut loss_sum, mut rows, mut hits) = (0.0, 0usize, 0usize);
        for batch in epoch_batches(data.len(), tc.batch_size, seed, epoch) {
            let x = data.x.select(Axis(0), &batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.y[i]).collect();
            let mixed = mixup_old(x.view(), &y, session.num_old, mixup, &mut rng)?;
            let t_logits = teacher.logits(mixed.x.view())?;
            let (f, s_logits, tape) = student.forward_train(mixed.x.view())?;
            let lg = loss_bkd(t_logits.view(), s_logits.view(), &weights, cfg.temperature)?;
            let pred = argmax_rows(s_logits.view());
            hits += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
            loss_sum += lg.loss * mixed.x.nrows() as f64;
            rows += mixed.x.nrows();
            let grad = student.backward(&f, &tape, &lg.grad);
            opt.step(lr, student.params_mut(), grad.slices());
        }
        let loss = loss_sum / rows as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("compression loss diverged at epoch {epoch}")));
        }
        logs.push(EpochLog {
            stage: if cfg.balanced { "compression" } else { "compression_kd" }.into(),
            session: session.t,
            epoch,
            lr,
            loss,
            loss_la: None,
            loss_fe: None,
            loss_kd: None,
            train_acc: hits as f64 / data.len() as f64,
        });
    }
    Ok((student, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mix_endpoints() {
        let a = array![1.0, 2.0];
        let b = array![-3.0, 5.0];
        assert_eq!(mix(a.view(), b.view(), 1.0), a);
        assert_eq!(mix(a.view(), a.view(), 0.5), a);
    }

    #[test]
    fn mixup_appends_one_row_per_old_exemplar() {
        let x = Array2::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64);
        let y = vec![0, 1, 0, 1, 0, 1, 0, 1, 5, 6];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mixup_old(x.view(), &y, 2, &MixupConfig::default(), &mut rng).unwrap();
        assert_eq!(m.num_original, 10);
        assert_eq!(m.x.nrows(), 18);
        assert_eq!(m.x.slice(ndarray::s![..10, ..]), x);
        for (r, &(i, j, l)) in m.pairs.iter().enumerate() {
            assert_ne!(i, j);
            assert!(y[i] < 2 && y[j] < 2);
            assert!((0.0..=1.0).contains(&l));
            let expect = mix(x.row(i), x.row(j), l);
            assert_eq!(m.x.row(10 + r), expect);
        }
    }

    #[test]
    fn mixup_skips_with_too_few_old() {
        let x = Array2::<f64>::zeros((3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mixup_old(x.view(), &[0, 4, 5], 2, &MixupConfig::default(), &mut rng).unwrap();
        assert_eq!(m.x.nrows(), 3);
        let off = MixupConfig {
            enabled: false,
            alpha: 0.5,
        };
        let m = mixup_old(x.view(), &[0, 1, 1], 2, &off, &mut rng).unwrap();
        assert!(m.pairs.is_empty());
    }
}
