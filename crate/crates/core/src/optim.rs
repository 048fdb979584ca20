//! SGD with momentum and L2 weight decay folded into the gradient (PyTorch
//! semantics), plus the cosine-annealed learning-rate schedule.

use std::f64::consts::PI;

/// Momentum SGD over an ordered list of parameter slices.
///
/// The order of slices passed to [`Sgd::step`] must be the same on every
/// call; buffers are matched by position.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    clip_norm: Option<f64>,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            clip_norm: None,
            buffers: Vec::new(),
        }
    }

    /// Rescales each step's raw gradient (before weight decay) so its global
    /// L2 norm is at most `max_norm`.
    pub fn with_clip_norm(mut self, max_norm: Option<f64>) -> Self {
        self.clip_norm = max_norm;
        self
    }

    pub fn step(&mut self, lr: f64, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "param/grad group count");
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let first = self.buffers.is_empty();
        if first {
            self.buffers = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), buf) in params.into_iter().zip(grads).zip(&mut self.buffers) {
            assert_eq!(p.len(), g.len());
            for ((pv, &gv), bv) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
                let d = scale * gv + self.weight_decay * *pv;
                *bv = if first { d } else { self.momentum * *bv + d };
                *pv -= lr * *bv;
            }
        }
    }
}

/// Learning rate for `epoch` (0-based) out of `epochs`, annealed from
/// `base_lr` towards zero along a half cosine.
pub fn cosine_lr(base_lr: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base_lr;
    }
    0.5 * base_lr * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}
