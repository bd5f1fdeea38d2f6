//! `train-forecasters`: fits every model on the ingest cache, writes
//! checkpoints, training traces and per-channel metric tables.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ingest::{self, IngestArtifacts};
use super::{read_stage_file, read_stage_json, write_atomic, write_json, PipelineError, Run};
use crate::forecast::{
    collect_channel_series, train, EpochRecord, Forecaster, LstmBaseline, LstmBaselineArch, Persistence,
    Seq2SeqArch, Seq2SeqParams, TrainConfig,
};
use crate::metrics::MetricReport;
use crate::nn::checkpoint::{read_tensors, restore_into, write_tensors};
use crate::nn::Parameters;
use crate::varma::VarmaForecaster;

const STAGE: &str = "train-forecasters";

/// Column order of the metric tables.
pub const MODELS: [&str; 4] = ["varma", "lstm", "seq2seq", "persistence"];

/// Independent seed for a named stochastic component.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta<A> {
    pub arch: A,
    pub best_epoch: Option<usize>,
    pub best_val_wmape: Option<f64>,
    pub parameters: usize,
}

/// Every trained forecaster, ready for evaluation or dispatch.
pub struct Models {
    pub seq2seq: Seq2SeqParams,
    pub lstm: LstmBaseline,
    pub varma: VarmaForecaster,
    pub persistence: Persistence,
}

impl Models {
    pub fn get(&self, name: &str) -> Option<&dyn Forecaster> {
        match name {
            "seq2seq" => Some(&self.seq2seq),
            "lstm" => Some(&self.lstm),
            "varma" => Some(&self.varma),
            "persistence" => Some(&self.persistence),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub eval_windows: usize,
    pub reports: Vec<MetricReport>,
}

impl ForecastSummary {
    pub fn report(&self, model: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.model == model)
    }
}

fn seq2seq_arch(run: &Run, channels: usize) -> Seq2SeqArch {
    let s = &run.config.models.seq2seq;
    Seq2SeqArch {
        channels,
        history_len: run.config.preprocess.history_len,
        horizon: run.config.preprocess.horizon,
        encoder_hidden: s.encoder_hidden,
        decoder_hidden: s.decoder_hidden,
        embed_dim: s.embed_dim,
        residual: s.residual,
    }
}

fn lstm_arch(run: &Run, channels: usize) -> LstmBaselineArch {
    let s = &run.config.models.lstm;
    LstmBaselineArch {
        channels,
        history_len: run.config.preprocess.history_len,
        horizon: run.config.preprocess.horizon,
        hidden: s.hidden,
        embed_dim: s.embed_dim,
        residual: s.residual,
    }
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

fn checkpoint_bytes<P: Parameters>(p: &P) -> Result<Vec<u8>, PipelineError> {
    let names = p.tensor_names();
    let tensors: Vec<(String, &crate::nn::Matrix)> = names.into_iter().zip(p.tensors()).collect();
    let mut buf = Vec::new();
    write_tensors(&mut buf, &tensors)?;
    Ok(buf)
}

fn trace_csv(trace: &[EpochRecord]) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in trace {
        w.serialize(r).map_err(|e| PipelineError::Validation(e.to_string()))?;
    }
    w.into_inner().map_err(|e| PipelineError::Validation(e.to_string()))
}

/// Training rows of the normalized frame, row-major, optionally only the
/// most recent `max_rows`.
fn training_series(art: &IngestArtifacts, max_rows: usize) -> Vec<f64> {
    let rows = art.train.rows();
    let start = if max_rows == 0 { rows.start } else { rows.end.saturating_sub(max_rows).max(rows.start) };
    (start..rows.end).flat_map(|r| art.train.frame_row(r).iter().copied()).collect()
}

fn save_meta<A: Serialize>(run: &Run, name: &str, meta: &ModelMeta<A>, ckpt: Vec<u8>) -> Result<(), PipelineError> {
    let dir = run.layout.models();
    write_atomic(&dir.join(format!("{name}.ckpt")), &ckpt)?;
    write_json(&dir.join(format!("{name}.json")), meta)
}

pub fn train_forecasters(run: &Run) -> Result<ForecastSummary, PipelineError> {
    let art = ingest::load(run)?;
    let c = art.norm.num_channels();
    let seed = run.config.seed;
    let models = &run.config.models;

    let s2s_cfg = with_seed(&models.seq2seq.train, derive_seed(seed, "seq2seq.train"));
    let lstm_cfg = with_seed(&models.lstm.train, derive_seed(seed, "lstm.train"));
    let s2s_init = Seq2SeqParams::init(
        seq2seq_arch(run, c),
        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "seq2seq.init")),
    );
    let lstm_init = LstmBaseline::init(
        lstm_arch(run, c),
        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "lstm.init")),
    );
    let (s2s, lstm) = run.in_pool(|| {
        rayon::join(
            || train(s2s_init, &art.train, &art.val, &art.norm, &s2s_cfg),
            || train(lstm_init, &art.train, &art.val, &art.norm, &lstm_cfg),
        )
    })?;
    let (s2s, lstm) = (s2s?, lstm?);
    log::info!("seq2seq: best epoch {:?}, val wMAPE {:.4}", s2s.best_epoch, s2s.best_val_wmape);
    log::info!("lstm: best epoch {:?}, val wMAPE {:.4}", lstm.best_epoch, lstm.best_val_wmape);

    let v = &models.varma;
    let series = training_series(&art, v.max_rows);
    let p = &run.config.preprocess;
    let varma = VarmaForecaster::fit(&series, c, v.p, v.q, p.history_len, p.horizon)?;

    let finite = |x: f64| x.is_finite().then_some(x);
    save_meta(
        run,
        "seq2seq",
        &ModelMeta {
            arch: s2s.model.arch,
            best_epoch: s2s.best_epoch,
            best_val_wmape: finite(s2s.best_val_wmape),
            parameters: s2s.model.parameter_count(),
        },
        checkpoint_bytes(&s2s.model)?,
    )?;
    save_meta(
        run,
        "lstm",
        &ModelMeta {
            arch: lstm.model.arch,
            best_epoch: lstm.best_epoch,
            best_val_wmape: finite(lstm.best_val_wmape),
            parameters: lstm.model.parameter_count(),
        },
        checkpoint_bytes(&lstm.model)?,
    )?;
    write_json(&run.layout.models().join("varma.json"), &varma)?;
    let fdir = run.layout.forecast();
    write_atomic(&fdir.join("trace_seq2seq.csv"), &trace_csv(&s2s.trace)?)?;
    write_atomic(&fdir.join("trace_lstm.csv"), &trace_csv(&lstm.trace)?)?;

    let all = Models {
        seq2seq: s2s.model,
        lstm: lstm.model,
        varma,
        persistence: Persistence::new(p.history_len, p.horizon, c),
    };
    let summary = evaluate(run, &art, &all)?;
    for (metric, table) in metric_tables(&summary) {
        write_atomic(&fdir.join(format!("{metric}.csv")), table.as_bytes())?;
    }
    write_json(&fdir.join("metrics.json"), &summary)?;
    Ok(summary)
}

/// Scores every model on the (thinned) test windows.
pub fn evaluate(run: &Run, art: &IngestArtifacts, models: &Models) -> Result<ForecastSummary, PipelineError> {
    let test = art.test.thinned(run.config.models.eval_stride);
    let idx: Vec<usize> = (0..test.len()).collect();
    let names = art.norm.channels.clone();
    let ranges: Vec<(f64, f64)> = (0..names.len()).map(|c| art.norm.range(c)).collect();
    let reports = run.in_pool(|| {
        use rayon::prelude::*;
        MODELS
            .par_iter()
            .map(|&m| {
                let f = models.get(m).expect("known model");
                let (actual, predicted) = collect_channel_series(f, &test, &idx, &art.norm)?;
                Ok(MetricReport::compute(m, &names, &actual, &predicted, &ranges)?)
            })
            .collect::<Result<Vec<_>, PipelineError>>()
    })??;
    Ok(ForecastSummary {
        eval_windows: test.len(),
        reports,
    })
}

/// `(metric, csv)` tables: one row per channel plus a `mean` row, one column
/// per model, and a `best` column naming the lowest value.
pub fn metric_tables(summary: &ForecastSummary) -> Vec<(&'static str, String)> {
    type Pick = fn(&crate::metrics::ChannelMetrics) -> Option<f64>;
    let metrics: [(&str, Pick); 3] = [
        ("rmse", |c| Some(c.rmse)),
        ("nrmse", |c| c.nrmse),
        ("wmape", |c| c.wmape),
    ];
    let reports: Vec<&MetricReport> = MODELS.iter().filter_map(|m| summary.report(m)).collect();
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (metric, pick) in metrics {
        let mut s = format!("channel,{},best\n", MODELS.join(","));
        let mut rows: Vec<(String, Vec<Option<f64>>)> = first
            .channels
            .iter()
            .enumerate()
            .map(|(ci, ch)| (ch.channel.clone(), reports.iter().map(|r| pick(&r.channels[ci])).collect()))
            .collect();
        let means = reports
            .iter()
            .map(|r| {
                let v: Vec<f64> = r.channels.iter().filter_map(pick).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        rows.push(("mean".into(), means));
        for (name, vals) in rows {
            let best = best_model(&vals).unwrap_or("");
            let cells: Vec<String> = vals.iter().map(|v| v.map(|x| format!("{x}")).unwrap_or_default()).collect();
            s.push_str(&format!("{name},{},{best}\n", cells.join(",")));
        }
        out.push((metric, s));
    }
    out
}

/// Model with the smallest defined value; ties go to the earlier column.
pub fn best_model(vals: &[Option<f64>]) -> Option<&'static str> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in vals.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| MODELS[i])
}

fn restore<P: Parameters>(p: &mut P, path: &std::path::Path) -> Result<(), PipelineError> {
    let bytes = read_stage_file(STAGE, path)?;
    let loaded = read_tensors(bytes.as_slice())?;
    let names = p.tensor_names();
    restore_into(loaded, &names, p.tensors_mut())?;
    Ok(())
}

pub fn load_models(run: &Run, channels: usize) -> Result<Models, PipelineError> {
    let dir = run.layout.models();
    let meta: ModelMeta<Seq2SeqArch> = read_stage_json(STAGE, &dir.join("seq2seq.json"))?;
    let mut seq2seq = Seq2SeqParams::zeros(meta.arch);
    restore(&mut seq2seq, &dir.join("seq2seq.ckpt"))?;
    let meta: ModelMeta<LstmBaselineArch> = read_stage_json(STAGE, &dir.join("lstm.json"))?;
    let mut lstm = LstmBaseline::zeros(meta.arch);
    restore(&mut lstm, &dir.join("lstm.ckpt"))?;
    let varma: VarmaForecaster = read_stage_json(STAGE, &dir.join("varma.json"))?;
    let p = &run.config.preprocess;
    for (name, c, n, m) in [
        ("seq2seq", seq2seq.num_channels(), seq2seq.history_len(), seq2seq.horizon()),
        ("lstm", lstm.num_channels(), lstm.history_len(), lstm.horizon()),
        ("varma", varma.num_channels(), varma.history_len(), varma.horizon()),
    ] {
        if (c, n, m) != (channels, p.history_len, p.horizon) {
            return Err(PipelineError::Validation(format!(
                "{name} checkpoint is {c} channels, {n} -> {m} steps; config expects {channels}, {} -> {}",
                p.history_len, p.horizon
            )));
        }
    }
    Ok(Models {
        seq2seq,
        lstm,
        varma,
        persistence: Persistence::new(p.history_len, p.horizon, channels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ChannelMetrics;

    fn report(model: &str, wmapes: &[Option<f64>]) -> MetricReport {
        MetricReport {
            model: model.into(),
            channels: wmapes
                .iter()
                .enumerate()
                .map(|(i, &w)| ChannelMetrics {
                    channel: format!("c{i}"),
                    rmse: w.unwrap_or(1.0),
                    nrmse: w,
                    wmape: w,
                    n: 10,
                })
                .collect(),
        }
    }

    #[test]
    fn derived_seeds_differ_by_tag_and_seed() {
        assert_ne!(derive_seed(0, "a"), derive_seed(0, "b"));
        assert_ne!(derive_seed(0, "a"), derive_seed(1, "a"));
        assert_eq!(derive_seed(5, "a"), derive_seed(5, "a"));
    }

    #[test]
    fn best_column_marks_the_minimum_and_skips_undefined() {
        assert_eq!(best_model(&[Some(0.3), Some(0.1), Some(0.2), None]), Some("lstm"));
        assert_eq!(best_model(&[None, None, Some(0.2), Some(0.2)]), Some("seq2seq"));
        assert_eq!(best_model(&[None; 4]), None);
    }

    #[test]
    fn metric_tables_have_model_columns_and_mean_row() {
        let summary = ForecastSummary {
            eval_windows: 1,
            reports: vec![
                report("varma", &[Some(0.5), None]),
                report("lstm", &[Some(0.4), None]),
                report("seq2seq", &[Some(0.2), None]),
                report("persistence", &[Some(0.9), None]),
            ],
        };
        let tables = metric_tables(&summary);
        assert_eq!(tables.iter().map(|t| t.0).collect::<Vec<_>>(), ["rmse", "nrmse", "wmape"]);
        let wmape = &tables[2].1;
        let lines: Vec<&str> = wmape.lines().collect();
        assert_eq!(lines[0], "channel,varma,lstm,seq2seq,persistence,best");
        assert_eq!(lines[1], "c0,0.5,0.4,0.2,0.9,seq2seq");
        assert_eq!(lines[2], "c1,,,,,");
        assert_eq!(lines[3], "mean,0.5,0.4,0.2,0.9,seq2seq");
    }
}
