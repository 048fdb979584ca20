//! Comparison methods: fine-tuning, plain replay, weight alignment and
//! unbalanced distillation.

use ndarray::{s, Array2, Axis};

use crate::compression::{train_compression, CompressionConfig, MixupConfig};
use crate::error::{Error, Result};
use crate::model::{Classifier, CompositeModel, OInitStrategy, SingleModel};
use crate::nn::BackboneConfig;
use crate::task_stream::SessionData;
use crate::train::{fit_supervised, mix_seed, EpochLog, TrainConfig};

fn start_model(
    session: &SessionData,
    prev: Option<&SingleModel>,
    backbone: &BackboneConfig,
    seed: u64,
) -> Result<SingleModel> {
    match prev {
        None if session.num_old == 0 => Ok(SingleModel::new(backbone, session.num_new, seed)),
        None => Err(Error::Protocol(format!(
            "session {} has old classes but no previous model",
            session.t
        ))),
        Some(p) if p.num_classes() != session.num_old => Err(Error::Protocol(format!(
            "previous model has {} classes, session {} expects {}",
            p.num_classes(),
            session.t,
            session.num_old
        ))),
        Some(p) => {
            let mut m = p.clone();
            m.frozen = false;
            m.backbone.frozen = false;
            m.grow_classifier(session.num_new, mix_seed(seed, 0xc01));
            Ok(m)
        }
    }
}

/// Cross-entropy on the new classes' data only; old-class classifier columns
/// are not updated.
pub fn train_finetune(
    session: &SessionData,
    prev: Option<&SingleModel>,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SingleModel, Vec<EpochLog>)> {
    let mut m = start_model(session, prev, backbone, seed)?;
    let logs = fit_supervised(
        &mut m,
        &session.new_train,
        cfg,
        session.num_old,
        seed,
        "finetune",
        session.t,
    )?;
    Ok((m, logs))
}

/// Cross-entropy on `D_t ∪ V_t`, everything trainable.
pub fn train_replay(
    session: &SessionData,
    prev: Option<&SingleModel>,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SingleModel, Vec<EpochLog>)> {
    let mut m = start_model(session, prev, backbone, seed)?;
    let logs = fit_supervised(&mut m, &session.combined, cfg, 0, seed, "replay", session.t)?;
    Ok((m, logs))
}

fn column_norm_means(w: &Array2<f64>, num_old: usize) -> (f64, f64) {
    let norms: Vec<f64> = w.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect();
    let (old, new) = norms.split_at(num_old);
    (
        old.iter().sum::<f64>() / old.len() as f64,
        new.iter().sum::<f64>() / new.len() as f64,
    )
}

/// Scales the new-class columns (`num_old..`) of a `d × classes` matrix so
/// their mean L2 norm equals that of the old-class columns. Returns the
/// aligned matrix and the factor applied.
pub fn weight_align(classifier: &Array2<f64>, num_old: usize) -> Result<(Array2<f64>, f64)> {
    if num_old == 0 || num_old >= classifier.ncols() {
        return Err(Error::Shape(format!(
            "need both old and new columns, got num_old = {num_old} of {}",
            classifier.ncols()
        )));
    }
    let (old, new) = column_norm_means(classifier, num_old);
    if !(new > 0.0) {
        return Err(Error::DegenerateCounts("new-class columns have zero norm".into()));
    }
    let gamma = old / new;
    let mut out = classifier.clone();
    out.slice_mut(s![.., num_old..]).mapv_inplace(|v| v * gamma);
    Ok((out, gamma))
}

/// Weight alignment on the boosted super classifier: every new-class
/// parameter (`O`, `W_n`, and the AZB bias) is scaled by the factor computed
/// from the monolithic matrix.
pub fn weight_align_composite(model: &mut CompositeModel) -> Result<f64> {
    let (_, gamma) = weight_align(&model.dense_classifier(), model.num_old)?;
    let b = &mut model.blocks;
    b.w_n.mapv_inplace(|v| v * gamma);
    b.o.mapv_inplace(|v| v * gamma);
    if model.strategy == OInitStrategy::Azb {
        b.bias.mapv_inplace(|v| v * gamma);
    }
    Ok(gamma)
}

/// Compression with uniform class weights and no mixup.
pub fn plain_kd_compress(
    session: &SessionData,
    teacher: &CompositeModel,
    cfg: &CompressionConfig,
    seed: u64,
) -> Result<(SingleModel, Vec<EpochLog>)> {
    let cfg = CompressionConfig {
        balanced: false,
        ..cfg.clone()
    };
    let mixup = MixupConfig {
        enabled: false,
        ..MixupConfig::default()
    };
    train_compression(session, teacher, &cfg, &mixup, seed)
}
