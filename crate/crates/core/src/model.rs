//! Single-backbone classifiers and the two-branch composite built by
//! expansion.
//!
//! The composite keeps the previous model frozen and adds a trainable
//! branch. Its super classifier is stored block-wise:
//!
//! ```text
//!            old feature   new feature
//! old cls  [   W_old     ,    W_o    ]
//! new cls  [     O       ,    W_n    ]
//! ```
//!
//! so the old-class logits are `W_oldᵀΦ_old + W_oᵀφ` and the new-class
//! logits are `W_nᵀφ` plus whatever `O` contributes under the chosen
//! [`OInitStrategy`].

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};
use crate::nn::{at_b, checksum, grads_as_slices, init_head, Backbone, BackboneConfig, LinearGrad, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

/// Anything that maps a batch to class logits.
pub trait Classifier {
    fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
    fn num_classes(&self) -> usize;
    fn parameter_count(&self) -> ParamCount;
}

/// Backbone followed by a bias-free linear head (`d × classes`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleModel {
    pub backbone: Backbone,
    pub classifier: Array2<f64>,
    pub frozen: bool,
}

impl SingleModel {
    pub fn new(config: &BackboneConfig, num_classes: usize, seed: u64) -> Self {
        let backbone = Backbone::new(config, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
        let classifier = init_head(config.feature_dim, num_classes, &mut rng);
        SingleModel {
            backbone,
            classifier,
            frozen: false,
        }
    }

    pub fn features(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.backbone.forward(x)
    }

    /// Appends `extra` freshly initialized class columns.
    pub fn grow_classifier(&mut self, extra: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = init_head(self.classifier.nrows(), extra, &mut rng);
        self.classifier = concatenate(Axis(1), &[self.classifier.view(), cols.view()])
            .expect("same rows")
            .as_standard_layout()
            .into_owned();
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.backbone.frozen = true;
    }

    pub fn checksum(&self) -> u64 {
        let mut slices = self.backbone.params();
        slices.push(self.classifier.as_slice().expect("standard layout"));
        checksum(slices)
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.backbone.params_mut();
        p.push(self.classifier.as_slice_mut().expect("standard layout"));
        p
    }
}

impl Classifier for SingleModel {
    fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.features(x)?.dot(&self.classifier))
    }

    fn num_classes(&self) -> usize {
        self.classifier.ncols()
    }

    fn parameter_count(&self) -> ParamCount {
        let total = self.backbone.num_params() + self.classifier.len();
        let trainable = if self.frozen { 0 } else { total };
        ParamCount { trainable, total }
    }
}

/// Gradients of a [`SingleModel`], same order as [`SingleModel::params_mut`].
#[derive(Debug, Clone)]
pub struct SingleGrad {
    pub backbone: Vec<LinearGrad>,
    pub classifier: Array2<f64>,
}

impl SingleGrad {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut g = grads_as_slices(&self.backbone);
        g.push(self.classifier.as_slice().expect("standard layout"));
        g
    }
}

impl SingleModel {
    /// Forward with tape; returns `(features, logits, tape)`.
    pub fn forward_train(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>, Tape)> {
        let (f, tape) = self.backbone.forward_tape(x)?;
        let z = f.dot(&self.classifier);
        Ok((f, z, tape))
    }

    pub fn backward(&self, features: &Array2<f64>, tape: &Tape, d_logits: &Array2<f64>) -> SingleGrad {
        let classifier = at_b(features.view(), d_logits.view());
        let d_feat = d_logits.dot(&self.classifier.t());
        SingleGrad {
            backbone: self.backbone.backward(tape, &d_feat),
            classifier,
        }
    }
}

/// How the `O` block (old feature → new-class logits) is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OInitStrategy {
    /// Zero and frozen: the old branch says nothing about new classes.
    #[default]
    Az,
    /// Zero and frozen, plus one trainable bias per new class.
    Azb,
    /// Zero-initialized and trained without restriction.
    Ft,
}

/// How the new branch's backbone is initialized on expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchInit {
    #[default]
    Fresh,
    /// Copy the old backbone's weights.
    CopyOld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBlocks {
    /// `d × num_old`, frozen.
    pub w_old: Array2<f64>,
    /// `d × num_new`.
    pub o: Array2<f64>,
    /// `d × num_old`, new feature → old-class logits.
    pub w_o: Array2<f64>,
    /// `d × num_new`.
    pub w_n: Array2<f64>,
    /// `d × (num_old + num_new)`, auxiliary head on the new feature alone.
    pub w_aux: Array2<f64>,
    /// New-class logit bias, used only under [`OInitStrategy::Azb`].
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeModel {
    pub old_branch: Backbone,
    pub new_branch: Backbone,
    pub blocks: ClassifierBlocks,
    pub num_old: usize,
    pub num_new: usize,
    pub strategy: OInitStrategy,
}

/// Everything one composite forward pass produces.
#[derive(Debug, Clone)]
pub struct CompositeForward {
    pub old_features: Array2<f64>,
    /// Frozen model's logits `W_oldᵀΦ_old(x)`, shared by the losses.
    pub old_logits: Array2<f64>,
    pub new_features: Array2<f64>,
    /// Composed logits, old classes first.
    pub logits: Array2<f64>,
    pub aux: Array2<f64>,
}

/// Gradients of the trainable part, same order as [`CompositeModel::trainable_params_mut`].
#[derive(Debug, Clone)]
pub struct CompositeGrad {
    pub new_branch: Vec<LinearGrad>,
    pub w_o: Array2<f64>,
    pub w_n: Array2<f64>,
    pub w_aux: Array2<f64>,
    pub o: Option<Array2<f64>>,
    pub bias: Option<Array1<f64>>,
}

impl CompositeGrad {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut g = grads_as_slices(&self.new_branch);
        for m in [&self.w_o, &self.w_n, &self.w_aux] {
            g.push(m.as_slice().expect("standard layout"));
        }
        if let Some(o) = &self.o {
            g.push(o.as_slice().expect("standard layout"));
        }
        if let Some(b) = &self.bias {
            g.push(b.as_slice().expect("standard layout"));
        }
        g
    }
}

impl Backbone {
    pub fn config(&self) -> BackboneConfig {
        let widths: Vec<usize> = self.layers.iter().map(|l| l.weight.nrows()).collect();
        BackboneConfig {
            input_dim: widths[0],
            hidden: widths[1..].to_vec(),
            feature_dim: self.feature_dim(),
        }
    }
}

/// Freezes `prev` as the old branch and attaches a new trainable branch of
/// the same topology for `num_new` additional classes.
pub fn expand(
    prev: &SingleModel,
    num_new: usize,
    strategy: OInitStrategy,
    branch_init: BranchInit,
    seed: u64,
) -> Result<CompositeModel> {
    if num_new < 1 {
        return Err(Error::InvalidArgument("expansion needs at least one new class".into()));
    }
    let num_old = prev.classifier.ncols();
    if num_old < 1 {
        return Err(Error::InvalidArgument("previous model covers no classes".into()));
    }
    let mut old_branch = prev.backbone.clone();
    old_branch.frozen = true;
    let mut new_branch = match branch_init {
        BranchInit::Fresh => Backbone::new(&prev.backbone.config(), seed),
        BranchInit::CopyOld => prev.backbone.clone(),
    };
    new_branch.frozen = false;
    let d = new_branch.feature_dim();
    let d_old = old_branch.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c_5eed);
    let blocks = ClassifierBlocks {
        w_old: prev.classifier.clone(),
        o: Array2::zeros((d_old, num_new)),
        w_o: init_head(d, num_old, &mut rng),
        w_n: init_head(d, num_new, &mut rng),
        w_aux: init_head(d, num_old + num_new, &mut rng),
        bias: Array1::zeros(num_new),
    };
    Ok(CompositeModel {
        old_branch,
        new_branch,
        blocks,
        num_old,
        num_new,
        strategy,
    })
}

impl CompositeModel {
    pub fn num_seen(&self) -> usize {
        self.num_old + self.num_new
    }

    /// `W_oldᵀΦ_old(x)`: exactly the previous model's logits.
    pub fn old_branch_logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.old_branch.forward(x)?.dot(&self.blocks.w_old))
    }

    /// Composes the full logit vector from the frozen model's outputs and the
    /// new feature.
    pub fn compose_logits(
        &self,
        old_logits: ArrayView2<'_, f64>,
        old_features: ArrayView2<'_, f64>,
        new_features: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let b = new_features.nrows();
        shape_check(
            old_logits.dim() == (b, self.num_old)
                && new_features.ncols() == self.blocks.w_n.nrows()
                && old_features.dim() == (b, self.blocks.o.nrows()),
            || {
                format!(
                    "old logits {:?}, old features {:?}, new features {:?} do not fit {} old / {} new classes",
                    old_logits.dim(),
                    old_features.dim(),
                    new_features.dim(),
                    self.num_old,
                    self.num_new
                )
            },
        )?;
        let upper = &old_logits + &new_features.dot(&self.blocks.w_o);
        let mut lower = new_features.dot(&self.blocks.w_n);
        match self.strategy {
            OInitStrategy::Az => {}
            OInitStrategy::Azb => lower += &self.blocks.bias,
            OInitStrategy::Ft => lower += &old_features.dot(&self.blocks.o),
        }
        Ok(concatenate(Axis(1), &[upper.view(), lower.view()])
            .expect("same rows")
            .as_standard_layout()
            .into_owned())
    }

    /// `W_auxᵀφ(x)`, logits of all seen classes from the new feature alone.
    pub fn aux_logits(&self, new_features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        shape_check(new_features.ncols() == self.blocks.w_aux.nrows(), || {
            format!(
                "new feature width {} vs auxiliary head input {}",
                new_features.ncols(),
                self.blocks.w_aux.nrows()
            )
        })?;
        Ok(new_features.dot(&self.blocks.w_aux))
    }

    fn finish_forward(&self, x: ArrayView2<'_, f64>, new_features: Array2<f64>) -> Result<CompositeForward> {
        let old_features = self.old_branch.forward(x)?;
        let old_logits = old_features.dot(&self.blocks.w_old);
        let logits = self.compose_logits(old_logits.view(), old_features.view(), new_features.view())?;
        let aux = self.aux_logits(new_features.view())?;
        Ok(CompositeForward {
            old_features,
            old_logits,
            new_features,
            logits,
            aux,
        })
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<CompositeForward> {
        let nf = self.new_branch.forward(x)?;
        self.finish_forward(x, nf)
    }

    pub fn forward_train(&self, x: ArrayView2<'_, f64>) -> Result<(CompositeForward, Tape)> {
        let (nf, tape) = self.new_branch.forward_tape(x)?;
        Ok((self.finish_forward(x, nf)?, tape))
    }

    /// Backward pass given gradients on the composed logits, on the old-class
    /// block alone (distillation), and on the auxiliary logits.
    pub fn backward(
        &self,
        fwd: &CompositeForward,
        tape: &Tape,
        d_logits: &Array2<f64>,
        d_aux: Option<&Array2<f64>>,
    ) -> CompositeGrad {
        let d_upper = d_logits.slice(s![.., ..self.num_old]);
        let d_lower = d_logits.slice(s![.., self.num_old..]);
        let f = &fwd.new_features;
        let w_o = at_b(f.view(), d_upper.view());
        let w_n = at_b(f.view(), d_lower.view());
        let mut d_feat = d_upper.dot(&self.blocks.w_o.t()) + d_lower.dot(&self.blocks.w_n.t());
        let w_aux = match d_aux {
            Some(da) => {
                d_feat += &da.dot(&self.blocks.w_aux.t());
                at_b(f.view(), da.view())
            }
            None => Array2::zeros(self.blocks.w_aux.dim()),
        };
        let o = (self.strategy == OInitStrategy::Ft).then(|| at_b(fwd.old_features.view(), d_lower.view()));
        let bias = (self.strategy == OInitStrategy::Azb).then(|| d_lower.sum_axis(Axis(0)));
        CompositeGrad {
            new_branch: self.new_branch.backward(tape, &d_feat),
            w_o,
            w_n,
            w_aux,
            o,
            bias,
        }
    }

    /// Trainable parameters: new branch, `W_o`, `W_n`, `W_aux`, plus `O`
    /// under FT or the bias under AZB.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut [f64]> {
        let strategy = self.strategy;
        let mut p = self.new_branch.params_mut();
        let b = &mut self.blocks;
        p.push(b.w_o.as_slice_mut().expect("standard layout"));
        p.push(b.w_n.as_slice_mut().expect("standard layout"));
        p.push(b.w_aux.as_slice_mut().expect("standard layout"));
        match strategy {
            OInitStrategy::Ft => p.push(b.o.as_slice_mut().expect("standard layout")),
            OInitStrategy::Azb => p.push(b.bias.as_slice_mut().expect("standard layout")),
            OInitStrategy::Az => {}
        }
        p
    }

    /// Checksum of the frozen old model (backbone and `W_old`).
    pub fn frozen_checksum(&self) -> u64 {
        let mut s = self.old_branch.params();
        s.push(self.blocks.w_old.as_slice().expect("standard layout"));
        checksum(s)
    }

    pub fn o_checksum(&self) -> u64 {
        checksum([self.blocks.o.as_slice().expect("standard layout")])
    }

    pub fn checksum(&self) -> u64 {
        let mut s = self.old_branch.params();
        s.extend(self.new_branch.params());
        let b = &self.blocks;
        for m in [&b.w_old, &b.o, &b.w_o, &b.w_n, &b.w_aux] {
            s.push(m.as_slice().expect("standard layout"));
        }
        s.push(b.bias.as_slice().expect("standard layout"));
        checksum(s)
    }

    /// The monolithic super classifier `(d_old + d_new) × classes`.
    pub fn dense_classifier(&self) -> Array2<f64> {
        let b = &self.blocks;
        let top = concatenate(Axis(1), &[b.w_old.view(), b.o.view()]).expect("rows");
        let bottom = concatenate(Axis(1), &[b.w_o.view(), b.w_n.view()]).expect("rows");
        concatenate(Axis(0), &[top.view(), bottom.view()]).expect("cols")
    }

    pub fn freeze(&mut self) {
        self.old_branch.frozen = true;
        self.new_branch.frozen = true;
    }
}

impl Classifier for CompositeModel {
    fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.logits)
    }

    fn num_classes(&self) -> usize {
        self.num_seen()
    }

    fn parameter_count(&self) -> ParamCount {
        let b = &self.blocks;
        let bias = if self.strategy == OInitStrategy::Azb {
            b.bias.len()
        } else {
            0
        };
        let o_trainable = if self.strategy == OInitStrategy::Ft {
            b.o.len()
        } else {
            0
        };
        let trainable_heads = b.w_o.len() + b.w_n.len() + b.w_aux.len() + bias + o_trainable;
        let new_branch = if self.new_branch.frozen {
            0
        } else {
            self.new_branch.num_params()
        };
        let total = self.old_branch.num_params()
            + self.new_branch.num_params()
            + b.w_old.len()
            + b.o.len()
            + b.w_o.len()
            + b.w_n.len()
            + b.w_aux.len()
            + bias;
        let trainable = if self.new_branch.frozen {
            0
        } else {
            new_branch + trainable_heads
        };
        ParamCount { trainable, total }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            input_dim: 4,
            hidden: vec![6],
            feature_dim: 5,
        }
    }

    fn batch(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 4), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn expand_shapes() {
        let prev = SingleModel::new(&cfg(), 5, 1);
        let m = expand(&prev, 3, OInitStrategy::Az, BranchInit::Fresh, 2).unwrap();
        assert_eq!(m.num_classes(), 8);
        assert_eq!(m.blocks.w_old, prev.classifier);
        assert_eq!(m.blocks.w_aux.dim(), (5, 8));
        assert_eq!(m.dense_classifier().dim(), (10, 8));
        assert!(matches!(
            expand(&prev, 0, OInitStrategy::Az, BranchInit::Fresh, 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn expand_is_seed_deterministic() {
        let prev = SingleModel::new(&cfg(), 5, 1);
        let a = expand(&prev, 3, OInitStrategy::Ft, BranchInit::Fresh, 9).unwrap();
        let b = expand(&prev, 3, OInitStrategy::Ft, BranchInit::Fresh, 9).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = expand(&prev, 3, OInitStrategy::Ft, BranchInit::Fresh, 10).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn zero_new_feature_under_az() {
        let prev = SingleModel::new(&cfg(), 2, 1);
        let m = expand(&prev, 3, OInitStrategy::Az, BranchInit::Fresh, 2).unwrap();
        let x = batch(4, 3);
        let old_f = m.old_branch.forward(x.view()).unwrap();
        let old_l = m.old_branch_logits(x.view()).unwrap();
        let z = m
            .compose_logits(old_l.view(), old_f.view(), Array2::zeros((4, 5)).view())
            .unwrap();
        assert_eq!(z.slice(s![.., ..2]), old_l);
        assert!(z.slice(s![.., 2..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn old_branch_matches_previous_model() {
        let prev = SingleModel::new(&cfg(), 3, 1);
        let m = expand(&prev, 2, OInitStrategy::Az, BranchInit::Fresh, 2).unwrap();
        let x = batch(6, 4);
        assert_eq!(m.old_branch_logits(x.view()).unwrap(), prev.logits(x.view()).unwrap());
    }

    #[test]
    fn compose_rejects_bad_shapes() {
        let prev = SingleModel::new(&cfg(), 3, 1);
        let m = expand(&prev, 2, OInitStrategy::Az, BranchInit::Fresh, 2).unwrap();
        let r = m.compose_logits(
            Array2::zeros((2, 2)).view(),
            Array2::zeros((2, 5)).view(),
            Array2::zeros((2, 5)).view(),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
        assert!(m.aux_logits(Array2::zeros((1, 4)).view()).is_err());
    }

    #[test]
    fn parameter_counts_add_up() {
        let prev = SingleModel::new(&cfg(), 3, 1);
        let single = prev.parameter_count().total;
        let m = expand(&prev, 2, OInitStrategy::Az, BranchInit::Fresh, 2).unwrap();
        let branch = prev.backbone.num_params();
        let blocks = 5 * 3 + 5 * 2 + 5 * 3 + 5 * 2 + 5 * 5;
        assert_eq!(m.parameter_count().total, 2 * branch + blocks);
        assert_eq!(m.parameter_count().trainable, branch + 5 * 3 + 5 * 2 + 5 * 5);
        assert_eq!(single, branch + 15);
    }

    #[test]
    fn freeze_is_idempotent() {
        let mut m = SingleModel::new(&cfg(), 3, 1);
        m.freeze();
        let once = m.clone();
        m.freeze();
        assert_eq!(once, m);
        assert_eq!(m.parameter_count().trainable, 0);
    }
}
