//! Feature boosting: train a new branch next to the frozen model so the
//! composed logits fit what the frozen model still gets wrong.
//!
//! The per-batch objective is `L_LA + L_FE + L_KD` with unit weights:
//!
//! * `L_LA`: cross-entropy on the composed logits after scaling the
//!   old/new blocks by `(γ_old, γ_new)` from effective numbers.
//! * `L_FE`: cross-entropy of the auxiliary head on the new feature alone.
//! * `L_KD`: temperature-softened distillation of the frozen model's
//!   old-class distribution into the composed old-class block.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{argmax_rows, gamma_factors, loss_fe, loss_kd, loss_la, GammaAggregation, GammaPair};
use crate::model::{expand, BranchInit, Classifier, CompositeGrad, CompositeModel, OInitStrategy, SingleModel};
use crate::optim::{cosine_lr, Sgd};
use crate::task_stream::SessionData;
use crate::train::{epoch_batches, EpochLog, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostingConfig {
    pub train: TrainConfig,
    pub beta: f64,
    pub temperature: f64,
    pub o_strategy: OInitStrategy,
    pub branch_init: BranchInit,
    pub gamma_aggregation: GammaAggregation,
    /// Scale logits by `γ` inside the classification loss.
    pub logits_alignment: bool,
    pub feature_enhancement: bool,
    pub distillation: bool,
}

impl Default for BoostingConfig {
    fn default() -> Self {
        BoostingConfig {
            train: TrainConfig::default(),
            beta: 0.97,
            temperature: 2.0,
            o_strategy: OInitStrategy::Az,
            branch_init: BranchInit::Fresh,
            gamma_aggregation: GammaAggregation::MeanCount,
            logits_alignment: true,
            feature_enhancement: true,
            distillation: true,
        }
    }
}

impl BoostingConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Value of each boosting term on one batch (batch means).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoostingLoss {
    pub la: f64,
    pub fe: f64,
    pub kd: f64,
    pub total: f64,
}

/// Scales used by logits alignment for this session, from the class counts of
/// `D_t ∪ V_t`.
pub fn session_gamma(session: &SessionData, cfg: &BoostingConfig) -> Result<GammaPair> {
    if !cfg.logits_alignment {
        return Ok(GammaPair::IDENTITY);
    }
    let count = |c: usize| session.class_counts.get(&c).copied().unwrap_or(0);
    let old: Vec<usize> = (0..session.num_old).map(count).collect();
    let new: Vec<usize> = (session.num_old..session.num_seen()).map(count).collect();
    gamma_factors(&old, &new, cfg.beta, cfg.gamma_aggregation)
}

/// Boosting loss and gradient on one batch.
pub fn loss_boosting(
    model: &CompositeModel,
    x: ArrayView2<'_, f64>,
    y: &[usize],
    gamma: GammaPair,
    cfg: &BoostingConfig,
) -> Result<(BoostingLoss, CompositeGrad, Array2<f64>)> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (fwd, tape) = model.forward_train(x)?;
    let la = loss_la(fwd.logits.view(), y, model.num_old, gamma)?;
    let mut d_logits = la.grad;
    let mut out = BoostingLoss {
        la: la.loss,
        ..Default::default()
    };
    let d_aux = if cfg.feature_enhancement {
        let fe = loss_fe(fwd.aux.view(), y)?;
        out.fe = fe.loss;
        Some(fe.grad)
    } else {
        None
    };
    if cfg.distillation {
        let upper = fwd.logits.slice(s![.., ..model.num_old]);
        let kd = loss_kd(fwd.old_logits.view(), upper, cfg.temperature)?;
        out.kd = kd.loss;
        d_logits
            .slice_mut(s![.., ..model.num_old])
            .zip_mut_with(&kd.grad, |a, b| *a += b);
    }
    out.total = out.la + out.fe + out.kd;
    let grad = model.backward(&fwd, &tape, &d_logits, d_aux.as_ref());
    Ok((out, grad, fwd.logits))
}

/// Expands `prev_model` and trains the new branch on `D_t ∪ V_t`.
pub fn train_boosting(
    session: &SessionData,
    prev_model: &SingleModel,
    cfg: &BoostingConfig,
    seed: u64,
) -> Result<(CompositeModel, Vec<EpochLog>)> {
    cfg.validate()?;
    if prev_model.num_classes() != session.num_old {
        return Err(Error::Protocol(format!(
            "previous model has {} classes, session {} expects {} old classes",
            prev_model.num_classes(),
            session.t,
            session.num_old
        )));
    }
    let mut model = expand(prev_model, session.num_new, cfg.o_strategy, cfg.branch_init, seed)?;
    let gamma = session_gamma(session, cfg)?;
    let data = &session.combined;
    let tc = &cfg.train;
    let mut opt = Sgd::new(tc.momentum, tc.weight_decay).with_clip_norm(tc.clip_norm);
    let mut logs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = cosine_lr(tc.lr, epoch, tc.epochs);
        let mut sum = BoostingLoss::default();
        let mut hits = 0usize;
        for batch in epoch_batches(data.len(), tc.batch_size, seed, epoch) {
            let x = data.x.select(Axis(0), &batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.y[i]).collect();
            let (l, grad, logits) = loss_boosting(&model, x.view(), &y, gamma, cfg)?;
            let w = batch.len() as f64;
            sum.la += l.la * w;
            sum.fe += l.fe * w;
            sum.kd += l.kd * w;
            sum.total += l.total * w;
            hits += argmax_rows(logits.view())
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            opt.step(lr, model.trainable_params_mut(), grad.slices());
        }
        let n = data.len() as f64;
        if !sum.total.is_finite() {
            return Err(Error::Numeric(format!("boosting loss diverged at epoch {epoch}")));
        }
        logs.push(EpochLog {
            stage: "boosting".into(),
            session: session.t,
            epoch,
            lr,
            loss: sum.total / n,
            loss_la: Some(sum.la / n),
            loss_fe: cfg.feature_enhancement.then_some(sum.fe / n),
            loss_kd: cfg.distillation.then_some(sum.kd / n),
            train_acc: hits as f64 / n,
        });
    }
    model.freeze();
    Ok((model, logs))
}
