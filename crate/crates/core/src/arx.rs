//! Autoregressive-with-exogenous-inputs least-squares baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DsprError, Result};
use crate::tensor::Tensor;

pub const RIDGE: f64 = 1e-6;

/// `y[t] = c + sum_i ar[i] * y[t-1-i] + sum_j sum_k exo[j][k] * x_j[t-1-k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArxModel {
    pub target: usize,
    /// Indices of the exogenous columns, in coefficient order.
    pub inputs: Vec<usize>,
    pub intercept: f64,
    pub ar: Vec<f64>,
    pub exo: Vec<Vec<f64>>,
    /// Set when the normal equations needed the ridge term.
    pub ridge_used: bool,
}

impl ArxModel {
    fn lags_needed(&self) -> usize {
        self.ar.len().max(self.exo.first().map_or(0, Vec::len))
    }

    /// One-step prediction for step `t` of a `[T, N]` series.
    fn step(&self, series: &[f64], n: usize, t: usize) -> f64 {
        let mut y = self.intercept;
        for (i, a) in self.ar.iter().enumerate() {
            y += a * series[(t - 1 - i) * n + self.target];
        }
        for (j, &col) in self.inputs.iter().enumerate() {
            for (k, b) in self.exo[j].iter().enumerate() {
                y += b * series[(t - 1 - k) * n + col];
            }
        }
        y
    }

    /// Recursive `horizon`-step forecast from a `[L, N]` window; exogenous
    /// inputs beyond the window hold their last observed value.
    pub fn forecast(&self, window: &Tensor, horizon: usize) -> Result<Vec<f64>> {
        let (l, n) = (window.shape()[0], window.shape()[1]);
        if l < self.lags_needed() {
            return Err(DsprError::Config(format!(
                "lookback {l} shorter than the model's {} lags",
                self.lags_needed()
            )));
        }
        let mut buf = window.data().to_vec();
        let last = window.data()[(l - 1) * n..].to_vec();
        let mut out = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let y = self.step(&buf, n, l + h);
            let mut row = last.clone();
            row[self.target] = y;
            buf.extend_from_slice(&row);
            out.push(y);
        }
        Ok(out)
    }

    /// Forecasts for every window of `x: [B, L, N]`, returned as `[B, H]`.
    pub fn predict(&self, x: &Tensor, horizon: usize) -> Result<Tensor> {
        let (b, l, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Vec::with_capacity(b * horizon);
        for bi in 0..b {
            let w = Tensor::new(vec![l, n], x.data()[bi * l * n..(bi + 1) * l * n].to_vec())?;
            out.extend(self.forecast(&w, horizon)?);
        }
        Tensor::new(vec![b, horizon], out)
    }
}

/// Ordinary least squares on a contiguous `[T, N]` series. Falls back to a
/// `1e-6` ridge when the normal matrix is not positive definite.
pub fn fit_arx(series: &Tensor, target: usize, order_p: usize, order_q: usize) -> Result<ArxModel> {
    if order_p == 0 || order_q == 0 {
        return Err(DsprError::Config("ARX orders must be >= 1".into()));
    }
    let (t_len, n) = (series.shape()[0], series.shape()[1]);
    let inputs: Vec<usize> = (0..n).filter(|&j| j != target).collect();
    let lags = order_p.max(order_q);
    let k = 1 + order_p + inputs.len() * order_q;
    if t_len < lags + k {
        return Err(DsprError::Config(format!(
            "{t_len} rows cannot identify {k} ARX coefficients"
        )));
    }
    let rows = t_len - lags;
    let d = series.data();
    let design = DMatrix::from_fn(rows, k, |r, c| {
        let t = r + lags;
        if c == 0 {
            return 1.0;
        }
        let c = c - 1;
        if c < order_p {
            return d[(t - 1 - c) * n + target];
        }
        let c = c - order_p;
        let (j, lag) = (c / order_q, c % order_q);
        d[(t - 1 - lag) * n + inputs[j]]
    });
    let rhs = DVector::from_fn(rows, |r, _| d[(r + lags) * n + target]);
    let gram = design.transpose() * &design;
    let moment = design.transpose() * rhs;
    let (solution, ridge_used) = match gram.clone().cholesky() {
        Some(ch) => (ch.solve(&moment), false),
        None => {
            let ridged = gram + DMatrix::identity(k, k) * RIDGE;
            let ch = ridged
                .cholesky()
                .ok_or_else(|| DsprError::Contract("ARX normal equations singular even with ridge".into()))?;
            (ch.solve(&moment), true)
        }
    };
    let w = solution.as_slice();
    Ok(ArxModel {
        target,
        intercept: w[0],
        ar: w[1..1 + order_p].to_vec(),
        exo: inputs
            .iter()
            .enumerate()
            .map(|(j, _)| w[1 + order_p + j * order_q..1 + order_p + (j + 1) * order_q].to_vec())
            .collect(),
        inputs,
        ridge_used,
    })
}
