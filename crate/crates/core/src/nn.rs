//! Minimal dense network pieces with hand-written backward passes.
//!
//! Everything is `f64` and row-major: a batch is an `Array2` with one
//! instance per row, linear weights are stored `in × out` so a forward pass
//! is `x.dot(&w)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Result};

/// Topology of a backbone: `input_dim → hidden... → feature_dim`, ReLU after
/// every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl BackboneConfig {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.feature_dim);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Linear {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Intermediate values kept by [`Backbone::forward_tape`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Feature extractor `R^D → R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub layers: Vec<Linear>,
    pub frozen: bool,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = config.widths();
        let layers = widths
            .windows(2)
            .map(|w| Linear::he_uniform(w[0], w[1], &mut rng))
            .collect();
        Backbone { layers, frozen: false }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.nrows())
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        shape_check(x.ncols() == self.input_dim(), || {
            format!(
                "backbone expects {} input features, got {}",
                self.input_dim(),
                x.ncols()
            )
        })
    }

    /// Inference forward pass. Never touches parameters.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer.forward(h.view());
            h.mapv_inplace(relu);
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(x)?;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_owned();
        for layer in &self.layers {
            let z = layer.forward(h.view());
            let a = z.mapv(relu);
            tape.inputs.push(h);
            tape.pre.push(z);
            h = a;
        }
        Ok((h, tape))
    }

    /// Parameter gradients given `d loss / d features`.
    pub fn backward(&self, tape: &Tape, grad_features: &Array2<f64>) -> Vec<LinearGrad> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_features.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            ndarray::Zip::from(&mut g).and(&tape.pre[l]).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            let weight = at_b(tape.inputs[l].view(), g.view());
            let bias = g.sum_axis(Axis(0));
            if l > 0 {
                g = g.dot(&layer.weight.t());
            }
            grads.push(LinearGrad { weight, bias });
        }
        grads.reverse();
        grads
    }

    /// Mutable parameter slices in a fixed order (weight, bias per layer).
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

pub fn grads_as_slices(grads: &[LinearGrad]) -> Vec<&[f64]> {
    grads
        .iter()
        .flat_map(|g| {
            [
                g.weight.as_slice().expect("standard layout"),
                g.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

/// `aᵀ b` in standard layout, so the result can be viewed as a flat slice.
pub(crate) fn at_b(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    a.t().dot(&b).as_standard_layout().into_owned()
}

#[inline]
pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Random linear head `d × k` with uniform(±1/sqrt(d)) entries.
pub fn init_head(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// FNV-1a over the bit patterns of a sequence of parameter slices.
pub fn checksum<'a>(slices: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for s in slices {
        for v in s {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        // separator so that slice boundaries matter
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
