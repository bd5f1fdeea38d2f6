//! Forecast error measures: RMSE, range-normalized RMSE and weighted MAPE.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {actual} actual vs {predicted} predicted")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("empty input")]
    Empty,
    #[error("non-finite input")]
    NonFinite,
    #[error("degenerate range: max == min == {0}")]
    DegenerateRange(f64),
    #[error("actual values sum to zero in absolute value")]
    ZeroDenominator,
}

fn check(actual: &[f64], predicted: &[f64]) -> Result<(), MetricError> {
    if actual.len() != predicted.len() {
        return Err(MetricError::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(MetricError::Empty);
    }
    if actual.iter().chain(predicted).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// `sqrt(mean((y − ŷ)²))`
pub fn rmse(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricError> {
    check(actual, predicted)?;
    let sse: f64 = actual.iter().zip(predicted).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok((sse / actual.len() as f64).sqrt())
}

/// `rmse / (max − min)`
pub fn nrmse(actual: &[f64], predicted: &[f64], range: (f64, f64)) -> Result<f64, MetricError> {
    let (lo, hi) = range;
    if hi <= lo {
        return Err(MetricError::DegenerateRange(hi));
    }
    Ok(rmse(actual, predicted)? / (hi - lo))
}

/// `Σ|y − ŷ| / Σ|y|`
pub fn wmape(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricError> {
    check(actual, predicted)?;
    let den: f64 = actual.iter().map(|y| y.abs()).sum();
    if den == 0.0 {
        return Err(MetricError::ZeroDenominator);
    }
    let num: f64 = actual.iter().zip(predicted).map(|(y, p)| (y - p).abs()).sum();
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: String,
    pub rmse: f64,
    /// `None` when the channel's range is degenerate.
    pub nrmse: Option<f64>,
    /// `None` when the channel is identically zero.
    pub wmape: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub channels: Vec<ChannelMetrics>,
}

impl MetricReport {
    /// Scores per-channel series; `ranges` are the normalization ranges.
    pub fn compute(
        model: &str,
        names: &[String],
        actual: &[Vec<f64>],
        predicted: &[Vec<f64>],
        ranges: &[(f64, f64)],
    ) -> Result<Self, MetricError> {
        let mut channels = Vec::with_capacity(names.len());
        for (c, name) in names.iter().enumerate() {
            let (y, p) = (&actual[c], &predicted[c]);
            let rmse = rmse(y, p)?;
            let nrmse = match nrmse(y, p, ranges[c]) {
                Ok(v) => Some(v),
                Err(MetricError::DegenerateRange(_)) => None,
                Err(e) => return Err(e),
            };
            let wmape = match wmape(y, p) {
                Ok(v) => Some(v),
                Err(MetricError::ZeroDenominator) => None,
                Err(e) => return Err(e),
            };
            channels.push(ChannelMetrics {
                channel: name.clone(),
                rmse,
                nrmse,
                wmape,
                n: y.len(),
            });
        }
        Ok(Self {
            model: model.to_string(),
            channels,
        })
    }

    /// Mean wMAPE over channels where it is defined.
    pub fn mean_wmape(&self) -> f64 {
        let vals: Vec<f64> = self.channels.iter().filter_map(|c| c.wmape).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("channel,rmse,nrmse,wmape,n\n");
        for c in &self.channels {
            out.push_str(&format!("{},{},{},{},{}\n", c.channel, c.rmse, fmt(c.nrmse), fmt(c.wmape), c.n));
        }
        out
    }
}
