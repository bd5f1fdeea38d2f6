//! Minibatch Adam training with early stopping on validation wMAPE.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{collect_channel_series, Batch, ForecastError, Forecaster};
use crate::metrics::wmape;
use crate::nn::{bind_all, clip_global_norm, collect_grads, AdamConfig, AdamState, NnError, Parameters, Tape, Var};
use crate::timeseries::{NormalizationParams, WindowedDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub lambda_recon: f64,
    pub lambda_type: f64,
    pub lambda_forecast: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub clip_norm: f64,
    /// Training windows drawn (without replacement) per epoch; 0 uses all.
    pub windows_per_epoch: usize,
    /// Evenly spaced validation windows scored per epoch; 0 uses all.
    pub val_windows: usize,
    /// Feed true previous targets to the generator while training.
    pub teacher_forcing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            lambda_recon: 0.5,
            lambda_type: 0.1,
            lambda_forecast: 1.0,
            patience: 5,
            clip_norm: 5.0,
            windows_per_epoch: 0,
            val_windows: 0,
            teacher_forcing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        let bad = |m: String| Err(ForecastError::InvalidConfig(m));
        if self.lambda_recon < 0.0 || self.lambda_type < 0.0 || !(self.lambda_forecast > 0.0) {
            return bad(format!(
                "loss weights must be >= 0 with a positive forecast weight, got {}/{}/{}",
                self.lambda_recon, self.lambda_type, self.lambda_forecast
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr and clip_norm must be positive".into());
        }
        Ok(())
    }
}

/// Scalar loss nodes of one minibatch graph.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub recon: Option<Var>,
    pub type_ce: Option<Var>,
    pub forecast: Var,
}

pub trait TrainableModel: Forecaster + Parameters + Clone {
    /// Records the weighted training loss for `batch`; `vars` are this
    /// model's tensors bound in `tensors()` order.
    fn loss_graph(&self, tape: &mut Tape, vars: &[Var], batch: &Batch, cfg: &TrainConfig) -> LossNodes;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub recon_loss: f64,
    pub type_loss: f64,
    pub forecast_loss: f64,
    pub val_wmape: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_wmape: f64,
}

/// Mean over channels of the watt-scale wMAPE; channels whose actuals are
/// all zero are skipped.
pub fn mean_channel_wmape<F: Forecaster + ?Sized>(
    f: &F,
    ds: &WindowedDataset,
    idx: &[usize],
    norm: &NormalizationParams,
) -> Result<f64, ForecastError> {
    let (actual, predicted) = collect_channel_series(f, ds, idx, norm)?;
    let mut sum = 0.0;
    let mut count = 0;
    for (y, p) in actual.iter().zip(&predicted) {
        match wmape(y, p) {
            Ok(v) => {
                sum += v;
                count += 1;
            }
            Err(crate::metrics::MetricError::ZeroDenominator) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// `k` evenly spaced indices out of `len` (all when `k == 0` or `k ≥ len`).
pub fn spread_indices(len: usize, k: usize) -> Vec<usize> {
    if k == 0 || k >= len {
        (0..len).collect()
    } else {
        (0..k).map(|i| i * len / k).collect()
    }
}

pub fn train<M: TrainableModel>(
    model: M,
    train_ds: &WindowedDataset,
    val_ds: &WindowedDataset,
    norm: &NormalizationParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>, ForecastError> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(ForecastError::EmptyDataset("training"));
    }
    if val_ds.is_empty() {
        return Err(ForecastError::EmptyDataset("validation"));
    }
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            trace: Vec::new(),
            best_epoch: None,
            best_val_wmape: f64::NAN,
        });
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &model.shapes());
    let val_idx = spread_indices(val_ds.len(), cfg.val_windows);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut best: Option<(f64, M, usize)> = None;
    let mut stale = 0;
    let mut trace = Vec::new();
    let name = model.name().to_string();
    let diverged = |epoch| ForecastError::DivergedLoss {
        model: name.clone(),
        epoch,
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let take = if cfg.windows_per_epoch == 0 {
            order.len()
        } else {
            cfg.windows_per_epoch.min(order.len())
        };
        let mut sums = [0.0f64; 4];
        for chunk in order[..take].chunks(cfg.batch_size) {
            let batch = Batch::from_dataset(train_ds, chunk);
            let mut tape = Tape::new();
            let vars = bind_all(&mut tape, &model);
            let nodes = model.loss_graph(&mut tape, &vars, &batch, cfg);
            let mut grads = match tape.backward(nodes.total) {
                Ok(g) => g,
                Err(NnError::NonFiniteLoss(_)) => return Err(diverged(epoch)),
                Err(e) => return Err(e.into()),
            };
            let mut g = collect_grads(&mut grads, &vars);
            clip_global_norm(&mut g, cfg.clip_norm);
            adam.step(model.tensors_mut(), &g)?;
            let w = chunk.len() as f64;
            sums[0] += tape.scalar(nodes.total) * w;
            sums[1] += nodes.recon.map_or(0.0, |v| tape.scalar(v)) * w;
            sums[2] += nodes.type_ce.map_or(0.0, |v| tape.scalar(v)) * w;
            sums[3] += tape.scalar(nodes.forecast) * w;
        }
        let val = mean_channel_wmape(&model, val_ds, &val_idx, norm)?;
        if !val.is_finite() {
            return Err(diverged(epoch));
        }
        let improved = best.as_ref().is_none_or(|(b, _, _)| val < *b);
        if improved {
            best = Some((val, model.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
        }
        let n = take as f64;
        trace.push(EpochRecord {
            epoch,
            train_loss: sums[0] / n,
            recon_loss: sums[1] / n,
            type_loss: sums[2] / n,
            forecast_loss: sums[3] / n,
            val_wmape: val,
            improved,
        });
        log::debug!("{name} epoch {epoch}: loss {:.5} val wMAPE {val:.4}", sums[0] / n);
        if cfg.patience > 0 && stale >= cfg.patience {
            break;
        }
    }
    let (best_val_wmape, model, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        trace,
        best_epoch: Some(best_epoch),
        best_val_wmape,
    })
}
