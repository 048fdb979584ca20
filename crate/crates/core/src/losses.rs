//! Losses used by boosting and compression, each returning the batch-mean
//! value together with its gradient with respect to the student logits.
//!
//! All KL terms are reduced as a sum over classes and a mean over the batch.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};

/// Batch-mean loss and `d loss / d logits` (already divided by batch size).
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array2<f64>,
}

/// Row-wise `log softmax(z / temperature)`.
pub fn log_softmax_rows(z: ArrayView2<'_, f64>, temperature: f64) -> Array2<f64> {
    let mut out = z.mapv(|v| v / temperature);
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(z: ArrayView2<'_, f64>, temperature: f64) -> Array2<f64> {
    log_softmax_rows(z, temperature).mapv(f64::exp)
}

fn check_targets(targets: &[usize], logits: ArrayView2<'_, f64>) -> Result<()> {
    shape_check(targets.len() == logits.nrows(), || {
        format!("{} targets for {} rows", targets.len(), logits.nrows())
    })?;
    if logits.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let k = logits.ncols();
    match targets.iter().find(|&&t| t >= k) {
        Some(&label) => Err(Error::Label { label, num_classes: k }),
        None => Ok(()),
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

/// `KL(onehot(y) ‖ softmax(z))`, i.e. the negative log-likelihood of the target.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, targets: &[usize]) -> Result<LossGrad> {
    check_targets(targets, logits)?;
    let b = logits.nrows() as f64;
    let logp = log_softmax_rows(logits, 1.0);
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        loss -= logp[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    grad /= b;
    Ok(LossGrad { loss: loss / b, grad })
}

/// Effective number of `n` samples: `(1 − βⁿ)/(1 − β)` for `β < 1`, `n` for `β = 1`.
///
/// `n` may be fractional (a mean class count).
pub fn effective_number(n: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    if !(n >= 0.0 && n.is_finite()) {
        return Err(Error::InvalidArgument(format!("count must be non-negative, got {n}")));
    }
    if beta == 1.0 {
        Ok(n)
    } else if n == 0.0 {
        Ok(0.0)
    } else {
        Ok((1.0 - beta.powf(n)) / (1.0 - beta))
    }
}

/// Old/new logit scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPair {
    pub old: f64,
    pub new: f64,
}

impl GammaPair {
    pub const IDENTITY: GammaPair = GammaPair { old: 1.0, new: 1.0 };
}

/// How per-class counts on each side are reduced to a single effective number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaAggregation {
    /// Effective number of the mean per-class count.
    #[default]
    MeanCount,
    /// Sum of per-class effective numbers.
    SumOfEffective,
}

pub fn gamma_factors(
    old_counts: &[usize],
    new_counts: &[usize],
    beta: f64,
    aggregation: GammaAggregation,
) -> Result<GammaPair> {
    if old_counts.is_empty() || new_counts.is_empty() {
        return Err(Error::DegenerateCounts(
            "need at least one old and one new class".into(),
        ));
    }
    let side = |counts: &[usize]| -> Result<f64> {
        match aggregation {
            GammaAggregation::MeanCount => {
                let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
                effective_number(mean, beta)
            }
            GammaAggregation::SumOfEffective => counts.iter().map(|&n| effective_number(n as f64, beta)).sum(),
        }
    };
    let e_old = side(old_counts)?;
    let e_new = side(new_counts)?;
    let total = e_old + e_new;
    if total <= 0.0 {
        return Err(Error::DegenerateCounts("both effective numbers are zero".into()));
    }
    Ok(GammaPair {
        old: e_old / total,
        new: e_new / total,
    })
}

/// Scales the first `num_old` logit columns by `γ.old` and the rest by `γ.new`.
pub fn aligned_logits(logits: ArrayView2<'_, f64>, num_old: usize, gamma: GammaPair) -> Result<Array2<f64>> {
    if num_old >= logits.ncols() {
        return Err(Error::Shape(format!(
            "num_old = {num_old} leaves no new-class logits out of {}",
            logits.ncols()
        )));
    }
    let mut out = logits.to_owned();
    out.slice_mut(ndarray::s![.., ..num_old])
        .mapv_inplace(|v| v * gamma.old);
    out.slice_mut(ndarray::s![.., num_old..])
        .mapv_inplace(|v| v * gamma.new);
    Ok(out)
}

/// Cross-entropy on aligned logits; the gradient is with respect to the
/// unaligned logits.
pub fn loss_la(logits: ArrayView2<'_, f64>, targets: &[usize], num_old: usize, gamma: GammaPair) -> Result<LossGrad> {
    let aligned = aligned_logits(logits, num_old, gamma)?;
    let mut lg = cross_entropy(aligned.view(), targets)?;
    lg.grad
        .slice_mut(ndarray::s![.., ..num_old])
        .mapv_inplace(|v| v * gamma.old);
    lg.grad
        .slice_mut(ndarray::s![.., num_old..])
        .mapv_inplace(|v| v * gamma.new);
    Ok(lg)
}

/// Cross-entropy of the auxiliary head.
pub fn loss_fe(aux_logits: ArrayView2<'_, f64>, targets: &[usize]) -> Result<LossGrad> {
    cross_entropy(aux_logits, targets)
}

/// `T² · KL(p ‖ q)` between a fixed target distribution `p` (rows) and
/// `softmax(student / T)`; gradient with respect to the student logits.
fn soft_kl(target: &Array2<f64>, student: ArrayView2<'_, f64>, t: f64) -> LossGrad {
    let b = student.nrows() as f64;
    let logq = log_softmax_rows(student, t);
    let mut loss = 0.0;
    for (p_row, lq_row) in target.rows().into_iter().zip(logq.rows()) {
        for (&p, &lq) in p_row.iter().zip(lq_row.iter()) {
            if p > 0.0 {
                loss += p * (p.ln() - lq);
            }
        }
    }
    let grad = (logq.mapv(f64::exp) - target) * (t / b);
    LossGrad {
        loss: t * t * loss / b,
        grad,
    }
}

/// Temperature-softened distillation from fixed teacher logits.
pub fn loss_kd(teacher: ArrayView2<'_, f64>, student: ArrayView2<'_, f64>, temperature: f64) -> Result<LossGrad> {
    check_temperature(temperature)?;
    shape_check(teacher.dim() == student.dim(), || {
        format!("teacher {:?} vs student {:?}", teacher.dim(), student.dim())
    })?;
    if student.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let p = softmax_rows(teacher, temperature);
    Ok(soft_kl(&p, student, temperature))
}

/// Per-class weights `∝ 1/E_{n_c}`, scaled to mean 1. `counts[c]` is the
/// number of training instances of positional class `c`.
pub fn bkd_weights(counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::DegenerateCounts("no classes".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::DegenerateCounts(format!("class {c} has no instances")));
    }
    let inv: Vec<f64> = counts
        .iter()
        .map(|&n| effective_number(n as f64, beta).map(|e| 1.0 / e))
        .collect::<Result<_>>()?;
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|v| v / mean).collect())
}

/// Softened teacher distribution, reweighted per class and renormalized.
pub fn balanced_targets(teacher: ArrayView2<'_, f64>, weights: &[f64], temperature: f64) -> Array2<f64> {
    let mut p = softmax_rows(teacher, temperature);
    for mut row in p.rows_mut() {
        for (v, w) in row.iter_mut().zip(weights) {
            *v *= w;
        }
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

pub fn loss_bkd(
    teacher: ArrayView2<'_, f64>,
    student: ArrayView2<'_, f64>,
    weights: &[f64],
    temperature: f64,
) -> Result<LossGrad> {
    check_temperature(temperature)?;
    shape_check(teacher.dim() == student.dim(), || {
        format!("teacher {:?} vs student {:?}", teacher.dim(), student.dim())
    })?;
    shape_check(weights.len() == student.ncols(), || {
        format!("{} weights for {} classes", weights.len(), student.ncols())
    })?;
    if student.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::InvalidArgument("class weights must be positive".into()));
    }
    let p = balanced_targets(teacher, weights, temperature);
    Ok(soft_kl(&p, student, temperature))
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(z: ArrayView2<'_, f64>) -> Vec<usize> {
    z.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
