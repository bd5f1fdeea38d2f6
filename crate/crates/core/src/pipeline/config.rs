//! Versioned experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::SynthConfig;
use super::PipelineError;
use crate::forecast::TrainConfig;
use crate::hems::{default_devices, peak_offpeak_prices, DeviceSpec, HemsConfig};
use crate::qlearn::QLearnConfig;
use crate::timeseries::{ChannelKind, ChannelSpec, SplitSpec};

pub const SCHEMA: &str = "seqhems.config.v1";

/// Forecasters the dispatch stage understands.
pub const FORECASTERS: [&str; 6] = ["seq2seq", "lstm", "varma", "persistence", "biased", "actual"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub seed: u64,
    /// Output directory; relative paths resolve against the config file.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub models: ModelsConfig,
    pub hems: HemsSection,
    pub dispatch: DispatchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Raw CSV (`timestamp,<channel>...`, watts); relative to the config
    /// file.
    pub path: PathBuf,
    /// Columns read from the CSV, in model order.
    #[serde(default = "super::synth::channel_specs")]
    pub channels: Vec<ChannelSpec>,
    /// Written by `synth-data`.
    #[serde(default)]
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub resample_seconds: i64,
    pub history_len: usize,
    pub horizon: usize,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seq2SeqSection {
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub residual: bool,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmSection {
    pub hidden: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub residual: bool,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarmaSection {
    pub p: usize,
    pub q: usize,
    /// Most recent training rows used for fitting; 0 uses all.
    #[serde(default)]
    pub max_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub seq2seq: Seq2SeqSection,
    pub lstm: LstmSection,
    pub varma: VarmaSection,
    /// Keep every k-th test window when scoring; 1 scores all.
    #[serde(default = "one")]
    pub eval_stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HemsSection {
    pub ess_capacity_kwh: f64,
    pub charge_power_kw: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub initial_soc: f64,
    pub peak_price: f64,
    pub off_peak_price: f64,
    pub sell_ratio: f64,
    /// Deferrable appliances; names must be data channels.
    pub devices: Vec<DeviceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchConfig {
    /// Evaluate the last `last_days` full days of the test partition.
    #[serde(default)]
    pub last_days: usize,
    /// Explicit `YYYY-MM-DD` days; overrides `last_days` when present.
    #[serde(default)]
    pub day_list: Option<Vec<String>>,
    pub forecasters: Vec<String>,
    pub repetitions: usize,
    /// PV multiplier of the `biased` forecaster.
    pub biased_pv_scale: f64,
    pub qlearn: QLearnConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA.to_string(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataConfig {
                path: PathBuf::from("data/synthetic.csv"),
                channels: super::synth::channel_specs(),
                synth: SynthConfig::default(),
            },
            preprocess: PreprocessConfig {
                resample_seconds: 600,
                history_len: 144,
                horizon: 6,
                split: SplitSpec::default(),
            },
            models: ModelsConfig {
                seq2seq: Seq2SeqSection {
                    encoder_hidden: 64,
                    decoder_hidden: 128,
                    embed_dim: 4,
                    residual: false,
                    train: TrainConfig::default(),
                },
                lstm: LstmSection {
                    hidden: 64,
                    embed_dim: 4,
                    residual: false,
                    train: TrainConfig {
                        lambda_recon: 0.0,
                        lambda_type: 0.0,
                        ..TrainConfig::default()
                    },
                },
                varma: VarmaSection { p: 6, q: 2, max_rows: 0 },
                eval_stride: 1,
            },
            hems: HemsSection {
                ess_capacity_kwh: 16.0,
                charge_power_kw: 4.0,
                soc_min: 0.1,
                soc_max: 0.9,
                initial_soc: 0.5,
                peak_price: 0.20,
                off_peak_price: 0.10,
                sell_ratio: 0.5,
                devices: default_devices(),
            },
            dispatch: DispatchConfig {
                last_days: 40,
                day_list: None,
                forecasters: FORECASTERS.iter().map(|s| s.to_string()).collect(),
                repetitions: 10,
                biased_pv_scale: 0.5,
                qlearn: QLearnConfig::default(),
            },
        }
    }
}

impl ExperimentConfig {
    /// Seconds-scale settings for smoke tests: a month of synthetic data,
    /// tiny networks and a few dispatch days.
    pub fn smoke() -> Self {
        let d = Self::default();
        let train = |lr: f64, recon: f64, ty: f64| TrainConfig {
            epochs: 2,
            batch_size: 16,
            lr,
            lambda_recon: recon,
            lambda_type: ty,
            windows_per_epoch: 128,
            val_windows: 64,
            ..TrainConfig::default()
        };
        Self {
            data: DataConfig {
                synth: SynthConfig {
                    days: 30,
                    ..SynthConfig::default()
                },
                ..d.data
            },
            preprocess: PreprocessConfig {
                history_len: 36,
                ..d.preprocess
            },
            models: ModelsConfig {
                seq2seq: Seq2SeqSection {
                    encoder_hidden: 8,
                    decoder_hidden: 8,
                    embed_dim: 2,
                    residual: false,
                    train: train(3e-3, 0.5, 0.1),
                },
                lstm: LstmSection {
                    hidden: 8,
                    embed_dim: 2,
                    residual: false,
                    train: train(3e-3, 0.0, 0.0),
                },
                varma: VarmaSection { p: 2, q: 1, max_rows: 2000 },
                eval_stride: 6,
            },
            dispatch: DispatchConfig {
                last_days: 2,
                repetitions: 2,
                qlearn: QLearnConfig {
                    episodes: 300,
                    ..QLearnConfig::default()
                },
                ..d.dispatch
            },
            ..d
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Validation(m));
        if self.schema != SCHEMA {
            return bad(format!("unsupported config schema `{}`, expected `{SCHEMA}`", self.schema));
        }
        let ch = &self.data.channels;
        if ch.iter().filter(|c| c.kind == ChannelKind::Pv).count() != 1 {
            return bad("data channels need exactly one pv channel".into());
        }
        if ch.iter().filter(|c| c.kind == ChannelKind::Total).count() > 1 {
            return bad("data channels have more than one total channel".into());
        }
        for d in &self.hems.devices {
            if !ch.iter().any(|c| c.name == d.name && c.kind == ChannelKind::Load) {
                return bad(format!("device `{}` is not a load channel of the data", d.name));
            }
        }
        self.preprocess
            .split
            .validate()
            .map_err(|e| PipelineError::Validation(e.to_string()))?;
        let p = &self.preprocess;
        if p.history_len == 0 || p.horizon == 0 || p.resample_seconds <= 0 {
            return bad("history_len, horizon and resample_seconds must be positive".into());
        }
        if (p.horizon as i64 * p.resample_seconds) % 3600 != 0 || 86_400 % (p.horizon as i64 * p.resample_seconds) != 0 {
            return bad(format!(
                "one dispatch step is the forecast horizon ({} x {} s); it must be whole hours dividing a day",
                p.horizon, p.resample_seconds
            ));
        }
        for t in [&self.models.seq2seq.train, &self.models.lstm.train] {
            t.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
        }
        if self.models.eval_stride == 0 {
            return bad("eval_stride must be positive".into());
        }
        if self.models.varma.p == 0 {
            return bad("VARMA order p must be positive".into());
        }
        let d = &self.dispatch;
        match &d.day_list {
            Some(list) if list.is_empty() => return bad("dispatch day_list is empty".into()),
            Some(list) => {
                for day in list {
                    if chrono::NaiveDate::parse_from_str(day, "%Y-%m-%d").is_err() {
                        return bad(format!("dispatch day `{day}` is not YYYY-MM-DD"));
                    }
                }
            }
            None if d.last_days == 0 => return bad("dispatch needs last_days > 0 or a day_list".into()),
            None => {}
        }
        if d.forecasters.is_empty() {
            return bad("dispatch forecaster list is empty".into());
        }
        for f in &d.forecasters {
            if !FORECASTERS.contains(&f.as_str()) {
                return bad(format!("unknown forecaster `{f}`; known: {}", FORECASTERS.join(", ")));
            }
        }
        if d.repetitions == 0 {
            return bad("dispatch repetitions must be positive".into());
        }
        d.qlearn.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
        let env = self.hems_config(vec![false; self.dispatch_horizon()]);
        crate::hems::Env::new(env.clone()).map_err(|e| PipelineError::Validation(e.to_string()))?;
        // The optimum is computed on a SOC lattice with one point per Q-learning
        // bin; it must contain the initial SOC and every charge step.
        let bins = d.qlearn.soc_bins;
        let spacing = (env.soc_max - env.soc_min) / (bins.max(2) - 1) as f64;
        let on_lattice = |x: f64| (x - x.round()).abs() <= 1e-9;
        if bins < 2 || !on_lattice(env.soc_step() / spacing) || env.soc_step() < spacing * (1.0 - 1e-9) {
            return bad(format!(
                "soc_bins {bins} gives lattice spacing {spacing}, which does not divide the SOC step {}",
                env.soc_step()
            ));
        }
        if !on_lattice((env.initial_soc - env.soc_min) / spacing) {
            return bad(format!("initial SOC {} is not on the {bins}-point SOC lattice", env.initial_soc));
        }
        Ok(())
    }

    /// Dispatch steps per day.
    pub fn dispatch_horizon(&self) -> usize {
        (86_400 / (self.preprocess.horizon as i64 * self.preprocess.resample_seconds)) as usize
    }

    pub fn step_hours(&self) -> f64 {
        (self.preprocess.horizon as i64 * self.preprocess.resample_seconds) as f64 / 3600.0
    }

    /// HEMS config for one day, with every device given `slots`.
    pub fn hems_config(&self, slots: Vec<bool>) -> HemsConfig {
        let h = &self.hems;
        let horizon = self.dispatch_horizon();
        let step = self.step_hours();
        HemsConfig {
            ess_capacity_kwh: h.ess_capacity_kwh,
            charge_power_kw: h.charge_power_kw,
            soc_min: h.soc_min,
            soc_max: h.soc_max,
            step_hours: step,
            horizon,
            prices: peak_offpeak_prices(horizon, step, 0.0, h.peak_price, h.off_peak_price, h.sell_ratio),
            devices: h
                .devices
                .iter()
                .map(|d| DeviceSpec {
                    request_slots: slots.clone(),
                    ..d.clone()
                })
                .collect(),
            initial_soc: h.initial_soc,
        }
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Resolves `p` against `base` unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
