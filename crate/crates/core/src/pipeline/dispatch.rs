//! `dispatch`: per day and forecaster, Q-learning trained offline on the
//! forecast day, tested online on the actual day, against the exact optimum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forecasters::{load_models, Models};
use super::ingest::{self, IngestArtifacts};
use super::{write_atomic, PipelineError, Run};
use crate::dp;
use crate::forecast::forecast_dataset;
use crate::hems::{derive_device_requests, Env};
use crate::qlearn::{test_online, train_offline};
use crate::timeseries::ChannelKind;

/// Hourly (per dispatch step) trajectories of one day, in kW.
#[derive(Debug, Clone, PartialEq)]
pub struct DayTrajectory {
    pub pv_kw: Vec<f64>,
    pub base_load_kw: Vec<f64>,
    /// Per configured device, in config order.
    pub device_kw: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationRow {
    pub day: String,
    pub forecaster: String,
    pub predicted_profit: f64,
    pub actual_profit: f64,
    pub optimal_profit: f64,
}

/// A selected evaluation day: its date and first frame row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Day {
    pub date: String,
    pub row: usize,
}

fn date_of(ts: i64) -> String {
    chrono::DateTime::from_timestamp(ts, 0).map_or_else(|| ts.to_string(), |d| d.format("%Y-%m-%d").to_string())
}

/// Full days of the test partition whose every dispatch step has a test
/// window ending right before it.
pub fn available_days(run: &Run, art: &IngestArtifacts) -> Vec<Day> {
    let p = &run.config.preprocess;
    let steps = run.config.dispatch_horizon();
    let rows = art.test.rows();
    let frame = &art.frame;
    rows.filter(|&r| frame.timestamp(r).rem_euclid(86_400) == 0)
        .filter(|&r| {
            (0..steps).all(|h| {
                (r + h * p.horizon)
                    .checked_sub(p.history_len)
                    .and_then(|s| art.test.find(s))
                    .is_some()
            })
        })
        .map(|r| Day {
            date: date_of(frame.timestamp(r)),
            row: r,
        })
        .collect()
}

pub fn select_days(run: &Run, art: &IngestArtifacts) -> Result<Vec<Day>, PipelineError> {
    let all = available_days(run, art);
    let d = &run.config.dispatch;
    let days = match &d.day_list {
        Some(list) => list
            .iter()
            .map(|want| {
                all.iter().find(|day| &day.date == want).cloned().ok_or_else(|| {
                    PipelineError::Validation(format!("day {want} is not a full day of the test partition"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => {
            if all.len() < d.last_days {
                log::warn!("only {} full test days available, {} requested", all.len(), d.last_days);
            }
            all[all.len().saturating_sub(d.last_days)..].to_vec()
        }
    };
    if days.is_empty() {
        return Err(PipelineError::Validation("no full days of the test partition to dispatch".into()));
    }
    Ok(days)
}

/// Step trajectories from per-step channel means in watts (`[T][C]`).
pub fn trajectory_from_watts(run: &Run, steps: &[Vec<f64>]) -> Result<DayTrajectory, PipelineError> {
    let ch = &run.config.data.channels;
    let col = |name: &str| ch.iter().position(|c| c.name == name);
    let kw = |i: usize| -> Vec<f64> { steps.iter().map(|s| s[i] / 1000.0).collect() };
    let pv = ch.iter().position(|c| c.kind == ChannelKind::Pv).expect("validated pv channel");
    let mut device_kw = Vec::new();
    for d in &run.config.hems.devices {
        let i = col(&d.name).ok_or_else(|| PipelineError::Validation(format!("no channel `{}`", d.name)))?;
        device_kw.push(kw(i));
    }
    let base_load_kw = match ch.iter().position(|c| c.kind == ChannelKind::Total) {
        Some(t) => {
            let total = kw(t);
            (0..steps.len())
                .map(|h| (total[h] - device_kw.iter().map(|d| d[h]).sum::<f64>()).max(0.0))
                .collect()
        }
        None => {
            let others: Vec<usize> = (0..ch.len())
                .filter(|&i| ch[i].kind == ChannelKind::Load && !run.config.hems.devices.iter().any(|d| d.name == ch[i].name))
                .collect();
            (0..steps.len()).map(|h| others.iter().map(|&i| steps[h][i] / 1000.0).sum()).collect()
        }
    };
    Ok(DayTrajectory {
        pv_kw: kw(pv),
        base_load_kw,
        device_kw,
    })
}

/// Per-step channel means (watts) of actual data for `day`.
fn actual_steps(run: &Run, art: &IngestArtifacts, day: &Day) -> Vec<Vec<f64>> {
    let m = run.config.preprocess.horizon;
    let c = art.frame.num_channels();
    (0..run.config.dispatch_horizon())
        .map(|h| {
            let mut acc = vec![0.0; c];
            for r in day.row + h * m..day.row + (h + 1) * m {
                for (a, v) in acc.iter_mut().zip(art.frame.row(r)) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / m as f64).collect()
        })
        .collect()
}

/// Per-step channel means (watts) of rolling forecasts for `day`: step `h`
/// is forecast from the `n` rows just before it.
fn forecast_steps(run: &Run, art: &IngestArtifacts, models: &Models, name: &str, day: &Day) -> Result<Vec<Vec<f64>>, PipelineError> {
    let p = &run.config.preprocess;
    let c = art.frame.num_channels();
    let base = if name == "biased" { "seq2seq" } else { name };
    let f = models
        .get(base)
        .ok_or_else(|| PipelineError::Validation(format!("unknown forecaster `{name}`")))?;
    let idx: Vec<usize> = (0..run.config.dispatch_horizon())
        .map(|h| art.test.find(day.row + h * p.horizon - p.history_len).expect("day was selected with full windows"))
        .collect();
    let fc = forecast_dataset(f, &art.test, &idx, &art.norm, idx.len())?;
    let pv = run.config.data.channels.iter().position(|ch| ch.kind == ChannelKind::Pv);
    Ok(fc
        .iter()
        .map(|w| {
            let mut acc = vec![0.0; c];
            for (j, v) in w.iter().enumerate() {
                acc[j % c] += v;
            }
            let mut mean: Vec<f64> = acc.iter().map(|a| a / p.horizon as f64).collect();
            if name == "biased" {
                if let Some(pv) = pv {
                    mean[pv] *= run.config.dispatch.biased_pv_scale;
                }
            }
            mean
        })
        .collect())
}

pub fn env_for(run: &Run, traj: &DayTrajectory) -> Result<Env, PipelineError> {
    let h = run.config.dispatch_horizon();
    let loads: Vec<(&str, &[f64])> = run
        .config
        .hems
        .devices
        .iter()
        .zip(&traj.device_kw)
        .map(|(d, kw)| (d.name.as_str(), kw.as_slice()))
        .collect();
    let mut cfg = run.config.hems_config(vec![false; h]);
    cfg.devices = derive_device_requests(&loads, &cfg.devices).map_err(|e| PipelineError::Validation(e.to_string()))?;
    Env::new(cfg).map_err(|e| PipelineError::Validation(e.to_string()))
}

/// Predicted and actual profit averaged over the seeded repetitions.
pub fn evaluate_forecast(run: &Run, forecast: &DayTrajectory, actual: &DayTrajectory, env_act: &Env) -> Result<(f64, f64), String> {
    let env_pred = env_for(run, forecast).map_err(|e| e.to_string())?;
    let reps = run.config.dispatch.repetitions;
    let (mut pred, mut act) = (0.0, 0.0);
    for rep in 0..reps {
        let qcfg = crate::qlearn::QLearnConfig {
            seed: run.config.seed.wrapping_add(rep as u64),
            ..run.config.dispatch.qlearn.clone()
        };
        let out = train_offline(&qcfg, &env_pred, &forecast.pv_kw, &forecast.base_load_kw).map_err(|e| e.to_string())?;
        let online = test_online(&out.table, qcfg.soc_bins, env_act, &actual.pv_kw, &actual.base_load_kw)
            .map_err(|e| e.to_string())?;
        pred += out.predicted_profit;
        act += online.profit;
    }
    Ok((pred / reps as f64, act / reps as f64))
}

pub fn dispatch(run: &Run) -> Result<Vec<OperationRow>, PipelineError> {
    let art = ingest::load(run)?;
    let forecasters = &run.config.dispatch.forecasters;
    let needs_models = forecasters.iter().any(|f| f != "actual");
    let models = if needs_models {
        Some(load_models(run, art.frame.num_channels())?)
    } else {
        None
    };
    let days = select_days(run, &art)?;
    log::info!("dispatch: {} days x {} forecasters", days.len(), forecasters.len());
    let day_err = |day: &Day, e: String| PipelineError::Day {
        day: day.date.clone(),
        message: e,
    };

    // Actual trajectories, environments and optima per day.
    let actuals = days
        .iter()
        .map(|day| {
            let traj = trajectory_from_watts(run, &actual_steps(run, &art, day))?;
            let env = env_for(run, &traj)?;
            Ok((traj, env))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let points = run.config.dispatch.qlearn.soc_bins;
    let optima = run.in_pool(|| {
        actuals
            .par_iter()
            .zip(&days)
            .map(|((traj, env), day)| {
                dp::solve(env, &traj.pv_kw, &traj.base_load_kw, points)
                    .map(|s| s.profit)
                    .map_err(|e| day_err(day, e.to_string()))
            })
            .collect::<Result<Vec<f64>, _>>()
    })??;

    let tasks: Vec<(usize, &String)> = (0..days.len()).flat_map(|d| forecasters.iter().map(move |f| (d, f))).collect();
    let rows = run.in_pool(|| {
        tasks
            .par_iter()
            .map(|&(d, name)| {
                let day = &days[d];
                let (actual, env_act) = &actuals[d];
                let forecast = if name == "actual" {
                    actual.clone()
                } else {
                    let steps = forecast_steps(run, &art, models.as_ref().expect("models loaded"), name, day)?;
                    trajectory_from_watts(run, &steps)?
                };
                let (predicted, actual_profit) =
                    evaluate_forecast(run, &forecast, actual, env_act).map_err(|e| day_err(day, format!("{name}: {e}")))?;
                if actual_profit > optima[d] + 1e-9 {
                    return Err(day_err(
                        day,
                        format!("{name}: online profit {actual_profit} exceeds the optimum {}", optima[d]),
                    ));
                }
                Ok(OperationRow {
                    day: day.date.clone(),
                    forecaster: name.clone(),
                    predicted_profit: predicted,
                    actual_profit,
                    optimal_profit: optima[d],
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()
    })??;

    let dir = run.layout.dispatch();
    write_atomic(&dir.join("operations.csv"), &operations_csv(&rows)?)?;
    write_atomic(&dir.join("profit_curves.csv"), profit_curves_csv(&rows, forecasters).as_bytes())?;
    Ok(rows)
}

pub fn operations_csv(rows: &[OperationRow]) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::Validation(e.to_string()))?;
    }
    w.into_inner().map_err(|e| PipelineError::Validation(e.to_string()))
}

pub fn read_operations(bytes: &[u8]) -> Result<Vec<OperationRow>, csv::Error> {
    csv::Reader::from_reader(bytes).deserialize().collect()
}

/// Wide, plot-ready table: one row per day, the optimum and each
/// forecaster's predicted and actual profit.
pub fn profit_curves_csv(rows: &[OperationRow], forecasters: &[String]) -> String {
    let mut s = String::from("day,optimal");
    for f in forecasters {
        s.push_str(&format!(",{f}_predicted,{f}_actual"));
    }
    s.push('\n');
    let mut days: Vec<&str> = Vec::new();
    for r in rows {
        if !days.contains(&r.day.as_str()) {
            days.push(&r.day);
        }
    }
    for day in days {
        let of_day: Vec<&OperationRow> = rows.iter().filter(|r| r.day == day).collect();
        s.push_str(&format!("{day},{}", of_day.first().map_or(f64::NAN, |r| r.optimal_profit)));
        for f in forecasters {
            match of_day.iter().find(|r| &r.forecaster == f) {
                Some(r) => s.push_str(&format!(",{},{}", r.predicted_profit, r.actual_profit)),
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ExperimentConfig;

    fn run() -> Run {
        Run::new(ExperimentConfig::default(), std::path::Path::new("."), None, 1).unwrap()
    }

    #[test]
    fn base_load_is_total_minus_devices_clamped() {
        let r = run();
        // hifi_router, dishwasher, pv, tumble_dryer, washing_machine, total
        let steps = vec![vec![50.0, 2000.0, 1500.0, 0.0, 0.0, 2300.0], vec![50.0, 0.0, 0.0, 2500.0, 0.0, 2000.0]];
        let t = trajectory_from_watts(&r, &steps).unwrap();
        assert_eq!(t.pv_kw, vec![1.5, 0.0]);
        assert_eq!(t.device_kw[0], vec![2.0, 0.0]);
        assert_eq!(t.device_kw[2], vec![0.0, 2.5]);
        assert!((t.base_load_kw[0] - 0.3).abs() < 1e-12);
        assert_eq!(t.base_load_kw[1], 0.0);
    }

    #[test]
    fn profit_curves_are_wide_per_day() {
        let row = |day: &str, f: &str, p: f64| OperationRow {
            day: day.into(),
            forecaster: f.into(),
            predicted_profit: p,
            actual_profit: p - 1.0,
            optimal_profit: 9.0,
        };
        let rows = vec![row("d1", "a", 1.0), row("d1", "b", 2.0), row("d2", "a", 3.0)];
        let csv = profit_curves_csv(&rows, &["a".into(), "b".into()]);
        assert_eq!(csv, "day,optimal,a_predicted,a_actual,b_predicted,b_actual\nd1,9,1,0,2,1\nd2,9,3,2,,\n");
        let back = read_operations(&operations_csv(&rows).unwrap()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn identical_forecast_and_actual_give_equal_profits() {
        let r = Run {
            config: ExperimentConfig {
                dispatch: crate::pipeline::config::DispatchConfig {
                    repetitions: 2,
                    qlearn: crate::qlearn::QLearnConfig {
                        episodes: 300,
                        ..Default::default()
                    },
                    ..ExperimentConfig::default().dispatch
                },
                ..ExperimentConfig::default()
            },
            ..run()
        };
        let h = r.config.dispatch_horizon();
        let traj = DayTrajectory {
            pv_kw: (0..h).map(|t| if (7..18).contains(&t) { 2.0 } else { 0.0 }).collect(),
            base_load_kw: vec![0.4; h],
            device_kw: vec![
                (0..h).map(|t| if t == 19 { 2.0 } else { 0.0 }).collect(),
                (0..h).map(|t| if (9..11).contains(&t) { 2.0 } else { 0.0 }).collect(),
                vec![0.0; h],
            ],
        };
        let env = env_for(&r, &traj).unwrap();
        let (p, a) = evaluate_forecast(&r, &traj, &traj, &env).unwrap();
        assert_eq!(p, a);
        let opt = dp::solve(&env, &traj.pv_kw, &traj.base_load_kw, 17).unwrap().profit;
        assert!(a <= opt + 1e-9);
    }

    #[test]
    fn low_pv_day_keeps_forecasters_in_a_narrow_band() {
        // Without PV the only lever is the battery on a known price curve, so
        // forecast errors on PV cannot move the online profit much.
        let r = Run {
            config: ExperimentConfig {
                dispatch: crate::pipeline::config::DispatchConfig {
                    repetitions: 2,
                    ..ExperimentConfig::default().dispatch
                },
                ..ExperimentConfig::default()
            },
            ..run()
        };
        let h = r.config.dispatch_horizon();
        let actual = DayTrajectory {
            pv_kw: vec![0.05; h],
            base_load_kw: vec![0.5; h],
            device_kw: vec![vec![0.0; h]; 3],
        };
        let env = env_for(&r, &actual).unwrap();
        let opt = dp::solve(&env, &actual.pv_kw, &actual.base_load_kw, 17).unwrap().profit;
        let mut profits = Vec::new();
        for scale in [0.0, 0.5, 1.0, 2.0] {
            let forecast = DayTrajectory {
                pv_kw: actual.pv_kw.iter().map(|v| v * scale).collect(),
                ..actual.clone()
            };
            profits.push(evaluate_forecast(&r, &forecast, &actual, &env).unwrap().1);
        }
        let lo = profits.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = profits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi <= opt + 1e-9);
        assert!(hi - lo <= 0.05 * opt.abs().max(1.0), "{profits:?} vs optimum {opt}");
    }
}
