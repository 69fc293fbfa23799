//! Linear read-out of per-token depth from frozen features.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Ridge strength used when the normal equations are singular.
pub const RIDGE_FALLBACK: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// Feature weights followed by the bias.
    pub weights: Vec<f64>,
    /// Whether the ridge fallback was needed.
    pub ridge: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub absrel: f64,
    /// Fraction with `max(d̂/d, d/d̂) < 1.25`.
    pub delta1: f64,
}

fn design(features: &[Tensor<f64>]) -> Result<DMatrix<f64>> {
    let cols = features.first().map(|f| f.cols()).ok_or_else(|| Error::NoData("probe has no scenes".into()))?;
    let rows: usize = features.iter().map(|f| f.rows()).sum();
    let mut x = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for f in features {
        if f.cols() != cols {
            return Err(Error::shape("probe features", &[cols], f.shape()));
        }
        for t in 0..f.rows() {
            for (c, &v) in f.row(t).iter().enumerate() {
                x[(r, c)] = v;
            }
            r += 1;
        }
    }
    Ok(x)
}

impl LinearProbe {
    /// Least squares from stacked per-scene features (`tokens×F`) onto
    /// per-token targets. Features and targets are centered so the bias is
    /// never regularized; a singular system falls back to ridge.
    pub fn fit(features: &[Tensor<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        let mut x = design(features)?;
        let mut y = DVector::from_iterator(targets.iter().map(|t| t.len()).sum(), targets.iter().flatten().copied());
        if y.len() != x.nrows() {
            return Err(Error::shape("probe targets", &[x.nrows()], &[y.len()]));
        }
        let n = x.nrows() as f64;
        let x_mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let y_mean = y.sum() / n;
        for (j, m) in x_mean.iter().enumerate() {
            x.column_mut(j).add_scalar_mut(-m);
        }
        y.add_scalar_mut(-y_mean);
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * &y;
        let ev = xtx.clone().symmetric_eigenvalues();
        let max = ev.iter().cloned().fold(0.0, f64::max);
        let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        let plain = if max > 0.0 && min / max > 1e-12 {
            xtx.clone().cholesky().map(|c| c.solve(&xty))
        } else {
            None
        };
        let (w, ridge) = match plain {
            Some(w) => (w, false),
            None => {
                warn!("probe normal equations singular; ridge λ = {RIDGE_FALLBACK}");
                let k = xtx.nrows();
                let reg = xtx + DMatrix::identity(k, k) * RIDGE_FALLBACK;
                let w = reg
                    .cholesky()
                    .ok_or_else(|| Error::Numeric("ridge system not positive definite".into()))?
                    .solve(&xty);
                (w, true)
            }
        };
        let bias = y_mean - w.iter().zip(&x_mean).map(|(a, b)| a * b).sum::<f64>();
        let mut weights: Vec<f64> = w.iter().copied().collect();
        weights.push(bias);
        Ok(Self { weights, ridge })
    }

    pub fn predict(&self, features: &Tensor<f64>) -> Result<Vec<f64>> {
        if features.cols() + 1 != self.weights.len() {
            return Err(Error::shape("probe predict", features.shape(), &[self.weights.len() - 1]));
        }
        let bias = self.weights[features.cols()];
        Ok((0..features.rows())
            .map(|t| features.row(t).iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + bias)
            .collect())
    }

    pub fn evaluate(&self, features: &[Tensor<f64>], targets: &[Vec<f64>]) -> Result<DepthMetrics> {
        let mut pred = Vec::new();
        for f in features {
            pred.extend(self.predict(f)?);
        }
        depth_metrics(&pred, &targets.concat())
    }
}

pub fn depth_metrics(pred: &[f64], truth: &[f64]) -> Result<DepthMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("depth metrics", &[pred.len()], &[truth.len()]));
    }
    if truth.iter().any(|&d| d <= 0.0) {
        return Err(Error::Domain("depth targets must be positive".into()));
    }
    let n = pred.len() as f64;
    let rmse = (pred.iter().zip(truth).map(|(p, d)| (p - d).powi(2)).sum::<f64>() / n).sqrt();
    let absrel = pred.iter().zip(truth).map(|(p, d)| (p - d).abs() / d).sum::<f64>() / n;
    let delta1 = pred
        .iter()
        .zip(truth)
        .filter(|(p, d)| **p > 0.0 && (*p / *d).max(*d / *p) < 1.25)
        .count() as f64
        / n;
    Ok(DepthMetrics { rmse, absrel, delta1 })
}
