//! Vector ARMA baseline fit by two-stage (Hannan–Rissanen) least squares.
//!
//! Stage 1 fits a long VAR by OLS and keeps its residuals as innovation
//! estimates; stage 2 regresses `y_t` on an intercept, `p` lags of `y` and
//! `q` lags of those residuals.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::{check_inputs, ForecastError, Forecaster};
use crate::linalg::{lstsq, LinalgError};
use crate::nn::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum VarmaError {
    #[error("singular design in stage {stage} regression (column {column}); a channel is likely constant")]
    SingularDesign { stage: u8, column: usize },
    #[error("{rows} rows are not enough for VARMA({p},{q}) on {k} channels (need more than {need})")]
    InsufficientData {
        rows: usize,
        p: usize,
        q: usize,
        k: usize,
        need: usize,
    },
    #[error("history has {got} rows, need at least {need}")]
    ShortHistory { got: usize, need: usize },
    #[error("series has {got} columns, model has {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("need p >= 1")]
    InvalidOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarmaModel {
    pub p: usize,
    pub q: usize,
    pub k: usize,
    /// `Φ_1 … Φ_p`, each `[k × k]` row-major; row `r` produces channel `r`.
    pub ar: Vec<Vec<f64>>,
    /// `Θ_1 … Θ_q`, same layout.
    pub ma: Vec<Vec<f64>>,
    pub intercept: Vec<f64>,
    /// Order of the stage-1 long VAR.
    pub long_order: usize,
    /// Last `q` stage-1 residuals of the training series, oldest first.
    pub residual_tail: Vec<Vec<f64>>,
}

/// In-sample stage-2 quantities, kept for diagnostics and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct VarmaFit {
    pub model: VarmaModel,
    /// Stage-1 residuals aligned with the series (`None` before
    /// `long_order`).
    pub residuals: Vec<Option<Vec<f64>>>,
    /// Stage-2 fitted values for rows `first_row..T`.
    pub fitted: Vec<Vec<f64>>,
    pub first_row: usize,
}

fn row(series: &[f64], k: usize, t: usize) -> &[f64] {
    &series[t * k..(t + 1) * k]
}

/// Minimum number of rows `fit` accepts is one more than this.
pub fn required_rows(p: usize, q: usize, k: usize) -> usize {
    p.max(q) + p * k + q * k + 10
}

/// Fits on a row-major `[T × k]` series.
pub fn fit(series: &[f64], k: usize, p: usize, q: usize) -> Result<VarmaFit, VarmaError> {
    if p == 0 {
        return Err(VarmaError::InvalidOrder);
    }
    if k == 0 || series.len() % k != 0 {
        return Err(VarmaError::ChannelMismatch {
            expected: k,
            got: series.len(),
        });
    }
    let t_len = series.len() / k;
    let need = required_rows(p, q, k);
    if t_len <= need {
        return Err(VarmaError::InsufficientData {
            rows: t_len,
            p,
            q,
            k,
            need,
        });
    }

    // Stage 1: long VAR. Its order is capped so stage 2 keeps at least as
    // many rows as the order-q fit needs.
    let mut long = if q == 0 { p } else { (2 * (p + q)).max(p + q + 1) };
    while long > p && t_len - long - q <= (1 + p * k + q * k) + 10 {
        long -= 1;
    }
    let rows1 = t_len - long;
    let d1 = 1 + long * k;
    let x1 = Matrix::from_fn(rows1, d1, |r, c| {
        if c == 0 {
            1.0
        } else {
            let lag = (c - 1) / k + 1;
            series[(r + long - lag) * k + (c - 1) % k]
        }
    });
    let y1 = Matrix::from_fn(rows1, k, |r, c| series[(r + long) * k + c]);
    let b1 = lstsq(&x1, &y1).map_err(|e| singular(1, e))?;
    let pred1 = x1.matmul(&b1);
    let mut residuals: Vec<Option<Vec<f64>>> = vec![None; t_len];
    for r in 0..rows1 {
        let t = r + long;
        residuals[t] = Some((0..k).map(|c| series[t * k + c] - pred1.get(r, c)).collect());
    }

    // Stage 2.
    let first = (long + q).max(p);
    let rows2 = t_len - first;
    let d2 = 1 + p * k + q * k;
    let x2 = Matrix::from_fn(rows2, d2, |r, c| {
        let t = r + first;
        if c == 0 {
            1.0
        } else if c <= p * k {
            let lag = (c - 1) / k + 1;
            series[(t - lag) * k + (c - 1) % k]
        } else {
            let cc = c - 1 - p * k;
            let lag = cc / k + 1;
            residuals[t - lag].as_ref().expect("residual exists after long order")[cc % k]
        }
    });
    let y2 = Matrix::from_fn(rows2, k, |r, c| series[(r + first) * k + c]);
    let b2 = lstsq(&x2, &y2).map_err(|e| singular(2, e))?;
    let fitted_m = x2.matmul(&b2);

    let coef = |base: usize, lag: usize| -> Vec<f64> {
        let mut m = vec![0.0; k * k];
        for r in 0..k {
            for c in 0..k {
                m[r * k + c] = b2.get(base + (lag - 1) * k + c, r);
            }
        }
        m
    };
    let model = VarmaModel {
        p,
        q,
        k,
        ar: (1..=p).map(|l| coef(1, l)).collect(),
        ma: (1..=q).map(|l| coef(1 + p * k, l)).collect(),
        intercept: (0..k).map(|r| b2.get(0, r)).collect(),
        long_order: long,
        residual_tail: (t_len - q..t_len)
            .map(|t| residuals[t].clone().expect("tail residuals exist"))
            .collect(),
    };
    let fitted = (0..rows2).map(|r| fitted_m.row(r).to_vec()).collect();
    Ok(VarmaFit {
        model,
        residuals,
        fitted,
        first_row: first,
    })
}

fn singular(stage: u8, e: LinalgError) -> VarmaError {
    match e {
        LinalgError::RankDeficient { column } => VarmaError::SingularDesign { stage, column },
        LinalgError::Underdetermined { rows, cols } => VarmaError::InsufficientData {
            rows,
            p: 0,
            q: 0,
            k: 0,
            need: cols,
        },
        LinalgError::ShapeMismatch { expected, got } => VarmaError::ChannelMismatch { expected, got },
    }
}

impl VarmaModel {
    fn one_step(&self, lags: &[&[f64]], shocks: &[&[f64]]) -> Vec<f64> {
        let k = self.k;
        let mut out = self.intercept.clone();
        for (phi, y) in self.ar.iter().zip(lags) {
            for r in 0..k {
                out[r] += (0..k).map(|c| phi[r * k + c] * y[c]).sum::<f64>();
            }
        }
        for (theta, e) in self.ma.iter().zip(shocks) {
            for r in 0..k {
                out[r] += (0..k).map(|c| theta[r * k + c] * e[c]).sum::<f64>();
            }
        }
        out
    }

    /// Forecast `m` steps past `history` (row-major `[T × k]`, `T ≥ p`)
    /// given the innovations of its last `q` rows (oldest first; missing
    /// leading entries count as zero). Future innovations are zero.
    pub fn forecast_with_residuals(
        &self,
        history: &[f64],
        past_residuals: &[Vec<f64>],
        m: usize,
    ) -> Result<Vec<f64>, VarmaError> {
        let k = self.k;
        if history.len() % k != 0 {
            return Err(VarmaError::ChannelMismatch {
                expected: k,
                got: history.len(),
            });
        }
        let t_len = history.len() / k;
        if t_len < self.p {
            return Err(VarmaError::ShortHistory {
                got: t_len,
                need: self.p,
            });
        }
        let mut ys: Vec<Vec<f64>> = (t_len - self.p..t_len).map(|t| row(history, k, t).to_vec()).collect();
        let zero = vec![0.0; k];
        let mut es: Vec<Vec<f64>> = vec![zero.clone(); self.q.saturating_sub(past_residuals.len())];
        es.extend(past_residuals.iter().skip(past_residuals.len().saturating_sub(self.q)).cloned());
        let mut out = Vec::with_capacity(m * k);
        for _ in 0..m {
            let lags: Vec<&[f64]> = ys.iter().rev().map(|v| v.as_slice()).collect();
            let shocks: Vec<&[f64]> = es.iter().rev().map(|v| v.as_slice()).collect();
            let next = self.one_step(&lags, &shocks);
            out.extend_from_slice(&next);
            if self.p > 0 {
                ys.remove(0);
                ys.push(next);
            }
            if self.q > 0 {
                es.remove(0);
                es.push(zero.clone());
            }
        }
        Ok(out)
    }

    /// Innovations of `history` obtained by running the model over it from
    /// zero initial innovations.
    pub fn filter_residuals(&self, history: &[f64]) -> Vec<Vec<f64>> {
        let k = self.k;
        let t_len = history.len() / k;
        let zero = vec![0.0; k];
        let mut res: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            if t < self.p {
                res.push(zero.clone());
                continue;
            }
            let lags: Vec<&[f64]> = (1..=self.p).map(|l| row(history, k, t - l)).collect();
            let shocks: Vec<&[f64]> = (1..=self.q)
                .map(|l| if t >= l { res[t - l].as_slice() } else { zero.as_slice() })
                .collect();
            let pred = self.one_step(&lags, &shocks);
            res.push(row(history, k, t).iter().zip(&pred).map(|(y, p)| y - p).collect());
        }
        res
    }

    /// Forecast with innovations estimated by filtering `history`.
    pub fn forecast(&self, history: &[f64], m: usize) -> Result<Vec<f64>, VarmaError> {
        if history.len() / self.k.max(1) < self.p {
            return Err(VarmaError::ShortHistory {
                got: history.len() / self.k.max(1),
                need: self.p,
            });
        }
        let res = self.filter_residuals(history);
        let tail = &res[res.len().saturating_sub(self.q)..];
        self.forecast_with_residuals(history, tail, m)
    }
}

/// VARMA over the non-constant channels of a series; constant channels
/// forecast their constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarmaForecaster {
    pub model: VarmaModel,
    pub channels: usize,
    pub history_len: usize,
    pub horizon: usize,
    /// Indices of modelled channels.
    pub active: Vec<usize>,
    /// Value forecast for each channel not in `active`.
    pub constants: Vec<(usize, f64)>,
}

impl VarmaForecaster {
    pub fn fit(
        series: &[f64],
        channels: usize,
        p: usize,
        q: usize,
        history_len: usize,
        horizon: usize,
    ) -> Result<Self, VarmaError> {
        let t_len = series.len() / channels.max(1);
        let mut active = Vec::new();
        let mut constants = Vec::new();
        for c in 0..channels {
            let first = series[c];
            if (0..t_len).all(|t| series[t * channels + c] == first) {
                constants.push((c, first));
            } else {
                active.push(c);
            }
        }
        let k = active.len();
        let sub: Vec<f64> = (0..t_len)
            .flat_map(|t| active.iter().map(move |&c| series[t * channels + c]))
            .collect();
        let model = fit(&sub, k, p, q)?.model;
        Ok(Self {
            model,
            channels,
            history_len,
            horizon,
            active,
            constants,
        })
    }

    pub fn predict(&self, window: &[f64]) -> Result<Vec<f64>, VarmaError> {
        let c = self.channels;
        let t_len = window.len() / c;
        let sub: Vec<f64> = (0..t_len)
            .flat_map(|t| self.active.iter().map(move |&a| window[t * c + a]))
            .collect();
        let fc = self.model.forecast(&sub, self.horizon)?;
        let k = self.active.len();
        let mut out = vec![0.0; self.horizon * c];
        for h in 0..self.horizon {
            for (j, &a) in self.active.iter().enumerate() {
                out[h * c + a] = fc[h * k + j];
            }
            for &(ch, v) in &self.constants {
                out[h * c + ch] = v;
            }
        }
        Ok(out)
    }
}

impl Forecaster for VarmaForecaster {
    fn name(&self) -> &str {
        "varma"
    }

    fn history_len(&self) -> usize {
        self.history_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_channels(&self) -> usize {
        self.channels
    }

    fn forecast_normalized(&self, inputs: &[&[f64]], day_of_week: &[u8]) -> Result<Vec<Vec<f64>>, ForecastError> {
        check_inputs(self, inputs, day_of_week)?;
        inputs
            .iter()
            .map(|w| self.predict(w).map_err(|e| ForecastError::ShapeMismatch(e.to_string())))
            .collect()
    }
}
