//! Functional gradient boosting on squared error, with regression stumps or
//! linear models as base learners.
//!
//! Under squared error the negative half-gradient with respect to the
//! current prediction is the residual `y − F(x)`, so each step fits a base
//! learner to the residuals and appends it with weight `α`.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `y − F(x)`.
pub fn residual_target(y: f64, prediction: f64) -> f64 {
    y - prediction
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerFamily {
    Stump,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaseLearner {
    /// `left` if `x[feature] <= threshold`, else `right`.
    Stump {
        feature: usize,
        threshold: f64,
        left: f64,
        right: f64,
    },
    Linear {
        coef: Vec<f64>,
        intercept: f64,
    },
}

impl BaseLearner {
    pub fn predict_one(&self, x: ArrayView1<'_, f64>) -> f64 {
        match self {
            BaseLearner::Stump {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    *left
                } else {
                    *right
                }
            }
            BaseLearner::Linear { coef, intercept } => {
                intercept + coef.iter().zip(x.iter()).map(|(c, v)| c * v).sum::<f64>()
            }
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        x.rows().into_iter().map(|r| self.predict_one(r)).collect()
    }

    /// Least-squares fit to `target`.
    pub fn fit(family: LearnerFamily, x: ArrayView2<'_, f64>, target: ArrayView1<'_, f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "cannot fit a learner to an empty dataset".into(),
            ));
        }
        if x.nrows() != target.len() {
            return Err(Error::Shape(format!("{} rows vs {} targets", x.nrows(), target.len())));
        }
        Ok(match family {
            LearnerFamily::Stump => fit_stump(x, target),
            LearnerFamily::Linear => fit_linear(x, target)?,
        })
    }
}

fn fit_stump(x: ArrayView2<'_, f64>, r: ArrayView1<'_, f64>) -> BaseLearner {
    let n = r.len();
    let total: f64 = r.sum();
    let mean = total / n as f64;
    // constant fit (no split) as the baseline
    let mut best = (
        r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>(),
        BaseLearner::Stump {
            feature: 0,
            threshold: f64::INFINITY,
            left: mean,
            right: mean,
        },
    );
    for j in 0..x.ncols() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| x[[a, j]].total_cmp(&x[[b, j]]));
        let (mut sum_l, mut sq_l) = (0.0, 0.0);
        let sq_total: f64 = r.iter().map(|v| v * v).sum();
        for k in 0..n - 1 {
            let v = r[order[k]];
            sum_l += v;
            sq_l += v * v;
            let (a, b) = (x[[order[k], j]], x[[order[k + 1], j]]);
            if a == b {
                continue;
            }
            let nl = (k + 1) as f64;
            let nr = (n - k - 1) as f64;
            let sum_r = total - sum_l;
            let sse = (sq_l - sum_l * sum_l / nl) + (sq_total - sq_l - sum_r * sum_r / nr);
            if sse < best.0 {
                best = (
                    sse,
                    BaseLearner::Stump {
                        feature: j,
                        threshold: 0.5 * (a + b),
                        left: sum_l / nl,
                        right: sum_r / nr,
                    },
                );
            }
        }
    }
    best.1
}

fn fit_linear(x: ArrayView2<'_, f64>, r: ArrayView1<'_, f64>) -> Result<BaseLearner> {
    // normal equations on [x, 1]
    let d = x.ncols() + 1;
    let mut a = vec![vec![0.0; d + 1]; d];
    for (row, &t) in x.rows().into_iter().zip(r.iter()) {
        let z: Vec<f64> = row.iter().copied().chain(std::iter::once(1.0)).collect();
        for i in 0..d {
            for k in 0..d {
                a[i][k] += z[i] * z[k];
            }
            a[i][d] += z[i] * t;
        }
    }
    let sol = solve(a).ok_or_else(|| Error::Numeric("singular design matrix".into()))?;
    Ok(BaseLearner::Linear {
        coef: sol[..d - 1].to_vec(),
        intercept: sol[d - 1],
    })
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..=n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    Some((0..n).map(|i| a[i][n] / a[i][i]).collect())
}

/// `F_m(x) = Σ α_i h_i(x)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdditiveEnsemble {
    pub learners: Vec<(f64, BaseLearner)>,
}

impl AdditiveEnsemble {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let mut out = Array1::zeros(x.nrows());
        for (alpha, h) in &self.learners {
            out.scaled_add(*alpha, &h.predict(x));
        }
        out
    }

    pub fn mse(&self, x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
        let p = self.predict(x);
        p.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
    }
}

/// Fits a new learner to the current residuals and returns the extended
/// ensemble; `ensemble` itself is left unchanged.
pub fn boost_step(
    ensemble: &AdditiveEnsemble,
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    family: LearnerFamily,
    alpha: f64,
) -> Result<AdditiveEnsemble> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let pred = ensemble.predict(x);
    let resid: Array1<f64> = y
        .iter()
        .zip(pred.iter())
        .map(|(&t, &f)| residual_target(t, f))
        .collect();
    let h = BaseLearner::fit(family, x, resid.view())?;
    let mut next = ensemble.clone();
    next.learners.push((alpha, h));
    Ok(next)
}
