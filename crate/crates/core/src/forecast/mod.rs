//! Window forecasters sharing one contract: normalized `[n × C]` history
//! plus day of week in, normalized `[m × C]` forecast out.

pub mod lstm_baseline;
pub mod persistence;
pub mod seq2seq;
pub mod train;

use thiserror::Error;

use crate::metrics::MetricError;
use crate::nn::{Matrix, NnError};
use crate::timeseries::{NormalizationParams, WindowedDataset};

pub use lstm_baseline::{LstmBaseline, LstmBaselineArch};
pub use persistence::Persistence;
pub use seq2seq::{Seq2SeqArch, Seq2SeqParams};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("{model}: loss diverged in epoch {epoch}")]
    DivergedLoss { model: String, epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

pub trait Forecaster {
    fn name(&self) -> &str;
    fn history_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn num_channels(&self) -> usize;

    /// One `[m × C]` row-major forecast per input window.
    fn forecast_normalized(&self, inputs: &[&[f64]], day_of_week: &[u8]) -> Result<Vec<Vec<f64>>, ForecastError>;
}

/// Validates window shapes against a forecaster.
pub(crate) fn check_inputs<F: Forecaster + ?Sized>(
    f: &F,
    inputs: &[&[f64]],
    day_of_week: &[u8],
) -> Result<(), ForecastError> {
    if inputs.len() != day_of_week.len() {
        return Err(ForecastError::ShapeMismatch(format!(
            "{} windows but {} day-of-week values",
            inputs.len(),
            day_of_week.len()
        )));
    }
    let want = f.history_len() * f.num_channels();
    if let Some(w) = inputs.iter().find(|w| w.len() != want) {
        return Err(ForecastError::ShapeMismatch(format!(
            "{}: window has {} values, expected {want}",
            f.name(),
            w.len()
        )));
    }
    if let Some(d) = day_of_week.iter().find(|&&d| d > 6) {
        return Err(ForecastError::ShapeMismatch(format!("day of week {d}")));
    }
    Ok(())
}

/// Back to watts, clamped at zero.
pub fn to_watts(norm: &NormalizationParams, forecast: &[f64]) -> Vec<f64> {
    let c = norm.num_channels();
    forecast
        .iter()
        .enumerate()
        .map(|(i, &v)| norm.denormalize_value(i % c, v).max(0.0))
        .collect()
}

/// Forecasts in watts for dataset windows `idx`, in chunks of `chunk`.
pub fn forecast_dataset<F: Forecaster + ?Sized>(
    f: &F,
    ds: &WindowedDataset,
    idx: &[usize],
    norm: &NormalizationParams,
    chunk: usize,
) -> Result<Vec<Vec<f64>>, ForecastError> {
    let mut out = Vec::with_capacity(idx.len());
    for part in idx.chunks(chunk.max(1)) {
        let inputs: Vec<&[f64]> = part.iter().map(|&i| ds.input(i)).collect();
        let dows: Vec<u8> = part.iter().map(|&i| ds.day_of_week(i)).collect();
        for fc in f.forecast_normalized(&inputs, &dows)? {
            out.push(to_watts(norm, &fc));
        }
    }
    Ok(out)
}

/// Per-channel actual and predicted watt series over windows `idx`
/// (every horizon step of every window).
pub fn collect_channel_series<F: Forecaster + ?Sized>(
    f: &F,
    ds: &WindowedDataset,
    idx: &[usize],
    norm: &NormalizationParams,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ForecastError> {
    let c = ds.num_channels();
    let preds = forecast_dataset(f, ds, idx, norm, 256)?;
    let mut actual = vec![Vec::with_capacity(idx.len() * ds.m); c];
    let mut predicted = vec![Vec::with_capacity(idx.len() * ds.m); c];
    for (k, &i) in idx.iter().enumerate() {
        let target = to_watts(norm, ds.target(i));
        for (j, (&y, &p)) in target.iter().zip(&preds[k]).enumerate() {
            actual[j % c].push(y);
            predicted[j % c].push(p);
        }
    }
    Ok((actual, predicted))
}

/// A minibatch laid out per time step: `inputs[t]` and `targets[t]` are
/// `[B × C]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub channels: usize,
    pub inputs: Vec<Matrix>,
    pub targets: Vec<Matrix>,
    pub day_of_week: Vec<usize>,
}

impl Batch {
    pub fn from_windows(inputs: &[&[f64]], day_of_week: &[u8], n: usize, channels: usize) -> Self {
        let b = inputs.len();
        let steps = (0..n)
            .map(|t| Matrix::from_fn(b, channels, |r, c| inputs[r][t * channels + c]))
            .collect();
        Batch {
            size: b,
            channels,
            inputs: steps,
            targets: Vec::new(),
            day_of_week: day_of_week.iter().map(|&d| d as usize).collect(),
        }
    }

    pub fn from_dataset(ds: &WindowedDataset, idx: &[usize]) -> Self {
        let c = ds.num_channels();
        let inputs: Vec<&[f64]> = idx.iter().map(|&i| ds.input(i)).collect();
        let dows: Vec<u8> = idx.iter().map(|&i| ds.day_of_week(i)).collect();
        let mut batch = Self::from_windows(&inputs, &dows, ds.n, c);
        batch.targets = (0..ds.m)
            .map(|t| Matrix::from_fn(idx.len(), c, |r, k| ds.target(idx[r])[t * c + k]))
            .collect();
        batch
    }

    pub fn history_len(&self) -> usize {
        self.inputs.len()
    }

    /// Per-window `[m × C]` forecasts from per-step `[B × C]` outputs.
    pub(crate) fn unstack(steps: &[Matrix]) -> Vec<Vec<f64>> {
        let b = steps.first().map_or(0, |s| s.rows());
        (0..b)
            .map(|r| steps.iter().flat_map(|s| s.row(r).iter().copied()).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_layout_is_time_major() {
        // two windows, n = 2, C = 2
        let w0 = [1.0, 2.0, 3.0, 4.0];
        let w1 = [5.0, 6.0, 7.0, 8.0];
        let b = Batch::from_windows(&[&w0, &w1], &[0, 6], 2, 2);
        assert_eq!(b.inputs[0].data(), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(b.inputs[1].data(), &[3.0, 4.0, 7.0, 8.0]);
        assert_eq!(Batch::unstack(&b.inputs), vec![w0.to_vec(), w1.to_vec()]);
    }

    #[test]
    fn watts_are_clamped() {
        let norm = NormalizationParams {
            channels: vec!["a".into(), "b".into()],
            min: vec![0.0, 100.0],
            max: vec![1000.0, 300.0],
        };
        assert_eq!(to_watts(&norm, &[0.5, 0.5, -0.2, -1.0]), vec![500.0, 200.0, 0.0, 0.0]);
    }
}
