//! Out-of-sample minimum-variance portfolio backtests.
//!
//! Row t of a panel pairs covariates U_t with the following day's returns
//! Y_t. The portfolio held over Y_i is built from a covariance estimate at U_i
//! trained on rows `[i − window, i)` only.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, FittedMethod, MethodSpec};
use crate::linalg::spd_solve;
use crate::rng;

pub const TRADING_DAYS: f64 = 252.0;

/// Global minimum-variance weights Σ⁻¹1 / 1ᵀΣ⁻¹1.
pub fn min_var_weights(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let ones = DVector::from_element(sigma.nrows(), 1.0);
    let x = spd_solve(sigma, &ones)?;
    let w = &x / x.sum();
    // A second pass removes the rounding left by the first division.
    Ok(&w / w.sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    /// Annualized mean return.
    pub avr: f64,
    /// Annualized standard deviation.
    pub std: f64,
    /// AVR / STD; undefined when STD is zero.
    pub ir: Option<f64>,
}

pub fn performance(returns: &[f64]) -> Result<Performance> {
    if returns.len() < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            actual: returns.len(),
        });
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let avr = mean * TRADING_DAYS;
    let std = (var * TRADING_DAYS).sqrt();
    Ok(Performance {
        avr,
        std,
        ir: (std > 0.0).then(|| avr / std),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    /// Panel rows whose returns were traded.
    pub rows: Vec<usize>,
    /// Row labels (dates) when the panel carries them.
    pub labels: Option<Vec<String>>,
    pub returns: Vec<f64>,
    pub weights: Vec<DVector<f64>>,
    pub performance: Performance,
}

/// Backtest settings. `refit_every = m` refits the estimator every m days;
/// days in between reuse the latest fit, which only saw rows before its own
/// anchor day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub window: usize,
    pub refit_every: usize,
}

impl BacktestConfig {
    fn validate(&self, panel: &Dataset) -> Result<()> {
        if self.window < 2 || self.refit_every == 0 {
            return Err(Error::config("window must be at least 2 and refit interval at least 1"));
        }
        if panel.n() < self.window + 2 {
            return Err(Error::InsufficientData {
                required: self.window + 2,
                actual: panel.n(),
            });
        }
        if self.window < panel.p() {
            log::warn!(
                "window {} is shorter than the {} assets; estimates lean on the PD correction",
                self.window,
                panel.p()
            );
        }
        Ok(())
    }
}

/// Runs a backtest with an arbitrary estimator. `fit` receives the training
/// rows and the anchor row index and returns a function mapping a covariate
/// vector to a covariance estimate.
pub fn backtest_with<F, E>(panel: &Dataset, config: BacktestConfig, fit: F) -> Result<BacktestResult>
where
    F: Fn(&Dataset, usize) -> Result<E> + Sync,
    E: Fn(&[f64]) -> Result<DMatrix<f64>>,
{
    config.validate(panel)?;
    let anchors: Vec<usize> = (config.window..panel.n()).step_by(config.refit_every).collect();
    let per_anchor = anchors
        .par_iter()
        .map(|&anchor| {
            let train: Vec<usize> = (anchor - config.window..anchor).collect();
            let estimate = fit(&panel.subset(&train)?, anchor)?;
            let end = (anchor + config.refit_every).min(panel.n());
            (anchor..end)
                .map(|i| {
                    let sigma = estimate(&panel.covariate_row(i))?;
                    let w = min_var_weights(&sigma)?;
                    let r = w.dot(&panel.response(i));
                    Ok((i, r, w))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let days: Vec<(usize, f64, DVector<f64>)> = per_anchor.into_iter().flatten().collect();
    let returns: Vec<f64> = days.iter().map(|d| d.1).collect();
    let rows: Vec<usize> = days.iter().map(|d| d.0).collect();
    let labels = panel.labels().map(|l| rows.iter().map(|&i| l[i].clone()).collect());
    Ok(BacktestResult {
        performance: performance(&returns)?,
        labels,
        rows,
        returns,
        weights: days.into_iter().map(|d| d.2).collect(),
    })
}

/// Backtests a method descriptor. The estimator is refit at each anchor day
/// with seed substream `("day", anchor)`, and the reported estimate of the
/// method (PD-corrected for modified methods) drives the weights.
pub fn backtest(
    panel: &Dataset,
    method: &MethodSpec,
    estimator: &EstimatorConfig,
    config: BacktestConfig,
) -> Result<BacktestResult> {
    let method = *method;
    backtest_with(panel, config, |train, anchor| {
        let cfg = estimator.with_seed(rng::derive_seed(estimator.seed(), "day", anchor as u64));
        let fitted = FittedMethod::fit(method.kind, train, &cfg)?;
        Ok(move |u: &[f64]| Ok(fitted.estimate_spec(u, &method)?.final_matrix().clone()))
    })
}

/// `date,return` lines, or `row,return` without labels.
pub fn write_returns_csv<W: std::io::Write>(result: &BacktestResult, mut w: W) -> Result<()> {
    let io = |e: std::io::Error| Error::Serde(e.to_string());
    let head = if result.labels.is_some() { "date" } else { "row" };
    writeln!(w, "{head},return").map_err(io)?;
    for (k, r) in result.returns.iter().enumerate() {
        let key = match &result.labels {
            Some(l) => l[k].clone(),
            None => result.rows[k].to_string(),
        };
        writeln!(w, "{key},{r}").map_err(io)?;
    }
    Ok(())
}

/// One line per traded day with the portfolio weights.
pub fn write_weights_csv<W: std::io::Write>(result: &BacktestResult, p: usize, mut w: W) -> Result<()> {
    let io = |e: std::io::Error| Error::Serde(e.to_string());
    let head = if result.labels.is_some() { "date" } else { "row" };
    let cols: Vec<String> = (1..=p).map(|j| format!("w{j}")).collect();
    writeln!(w, "{head},{}", cols.join(",")).map_err(io)?;
    for (k, weights) in result.weights.iter().enumerate() {
        let key = match &result.labels {
            Some(l) => l[k].clone(),
            None => result.rows[k].to_string(),
        };
        let vals: Vec<String> = weights.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{key},{}", vals.join(",")).map_err(io)?;
    }
    Ok(())
}

impl Performance {
    /// `AVR=…% STD=…% IR=…` with percentages to two decimals.
    pub fn summary(&self) -> String {
        let ir = self.ir.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into());
        format!("AVR={:.2}% STD={:.2}% IR={ir}", 100.0 * self.avr, 100.0 * self.std)
    }
}
