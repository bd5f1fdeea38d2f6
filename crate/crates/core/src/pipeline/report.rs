//! `report`: consolidates metric and operation outputs into JSON and
//! Markdown summaries.

use serde::{Deserialize, Serialize};

use super::dispatch::{read_operations, OperationRow};
use super::forecasters::{best_model, ForecastSummary, MODELS};
use super::{read_stage_file, read_stage_json, write_atomic, write_json, PipelineError, Run};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub mean_wmape: Option<f64>,
    /// Channels on which this model has the lowest wMAPE.
    pub best_channels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterOperation {
    pub forecaster: String,
    pub days: usize,
    pub mean_predicted: f64,
    pub mean_actual: f64,
    pub mean_optimal: f64,
    /// Mean |predicted − actual| daily profit.
    pub mean_gap: f64,
    pub max_gap: f64,
    /// Mean optimal − actual.
    pub mean_regret: f64,
    /// Days where actual exceeds optimal by more than 1e-9.
    pub dominance_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub eval_windows: usize,
    pub models: Vec<ModelSummary>,
    pub operation: Vec<ForecasterOperation>,
}

impl Summary {
    pub fn operation(&self, forecaster: &str) -> Option<&ForecasterOperation> {
        self.operation.iter().find(|o| o.forecaster == forecaster)
    }
}

pub fn summarize_operations(rows: &[OperationRow]) -> Vec<ForecasterOperation> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.forecaster.as_str()) {
            names.push(&r.forecaster);
        }
    }
    names
        .into_iter()
        .map(|f| {
            let of: Vec<&OperationRow> = rows.iter().filter(|r| r.forecaster == f).collect();
            let n = of.len() as f64;
            let mean = |g: &dyn Fn(&OperationRow) -> f64| of.iter().map(|r| g(r)).sum::<f64>() / n;
            ForecasterOperation {
                forecaster: f.to_string(),
                days: of.len(),
                mean_predicted: mean(&|r| r.predicted_profit),
                mean_actual: mean(&|r| r.actual_profit),
                mean_optimal: mean(&|r| r.optimal_profit),
                mean_gap: mean(&|r| (r.predicted_profit - r.actual_profit).abs()),
                max_gap: of.iter().map(|r| (r.predicted_profit - r.actual_profit).abs()).fold(0.0, f64::max),
                mean_regret: mean(&|r| r.optimal_profit - r.actual_profit),
                dominance_violations: of.iter().filter(|r| r.actual_profit > r.optimal_profit + 1e-9).count(),
            }
        })
        .collect()
}

pub fn summarize_models(f: &ForecastSummary) -> Vec<ModelSummary> {
    let reports: Vec<_> = MODELS.iter().filter_map(|m| f.report(m)).collect();
    let mut best: Vec<Vec<String>> = vec![Vec::new(); reports.len()];
    if let Some(first) = reports.first() {
        for (ci, ch) in first.channels.iter().enumerate() {
            let vals: Vec<Option<f64>> = MODELS
                .iter()
                .map(|m| f.report(m).and_then(|r| r.channels[ci].wmape))
                .collect();
            if let Some(b) = best_model(&vals) {
                if let Some(k) = reports.iter().position(|r| r.model == b) {
                    best[k].push(ch.channel.clone());
                }
            }
        }
    }
    reports
        .iter()
        .zip(best)
        .map(|(r, best_channels)| ModelSummary {
            model: r.model.clone(),
            mean_wmape: Some(r.mean_wmape()).filter(|v| v.is_finite()),
            best_channels,
        })
        .collect()
}

pub fn markdown(s: &Summary) -> String {
    let mut md = String::from("# Experiment summary\n\n");
    md.push_str(&format!("Config hash: `{}`\n\n", s.config_hash));
    md.push_str(&format!("## Forecast accuracy ({} test windows)\n\n", s.eval_windows));
    md.push_str("| model | mean wMAPE | best on |\n|---|---|---|\n");
    for m in &s.models {
        let w = m.mean_wmape.map_or("n/a".into(), |v| format!("{v:.4}"));
        md.push_str(&format!("| {} | {w} | {} |\n", m.model, m.best_channels.join(", ")));
    }
    md.push_str("\n## Operation (daily profit)\n\n");
    md.push_str("| forecaster | days | predicted | actual | optimal | mean gap | max gap | regret |\n");
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for o in &s.operation {
        md.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            o.forecaster, o.days, o.mean_predicted, o.mean_actual, o.mean_optimal, o.mean_gap, o.max_gap, o.mean_regret
        ));
    }
    md
}

pub fn report(run: &Run) -> Result<Summary, PipelineError> {
    let forecast: ForecastSummary =
        read_stage_json("train-forecasters", &run.layout.forecast().join("metrics.json"))?;
    let ops_path = run.layout.dispatch().join("operations.csv");
    let ops = read_operations(&read_stage_file("dispatch", &ops_path)?).map_err(|e| PipelineError::format(&ops_path, e))?;
    let summary = Summary {
        config_hash: run.config.hash(),
        eval_windows: forecast.eval_windows,
        models: summarize_models(&forecast),
        operation: summarize_operations(&ops),
    };
    let dir = run.layout.report();
    write_json(&dir.join("summary.json"), &summary)?;
    write_atomic(&dir.join("summary.md"), markdown(&summary).as_bytes())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(f: &str, p: f64, a: f64, o: f64) -> OperationRow {
        OperationRow {
            day: "d".into(),
            forecaster: f.into(),
            predicted_profit: p,
            actual_profit: a,
            optimal_profit: o,
        }
    }

    #[test]
    fn gap_statistics_by_hand() {
        let rows = vec![row("x", 3.0, 1.0, 2.0), row("y", 0.0, 0.0, 0.0), row("x", 1.0, 2.0, 2.0)];
        let s = summarize_operations(&rows);
        assert_eq!(s.len(), 2);
        let x = &s[0];
        assert_eq!(x.forecaster, "x");
        assert_eq!(x.days, 2);
        assert_eq!(x.mean_gap, 1.5);
        assert_eq!(x.max_gap, 2.0);
        assert_eq!(x.mean_actual, 1.5);
        assert_eq!(x.mean_regret, 0.5);
        assert_eq!(x.dominance_violations, 0);
        assert_eq!(s[1].mean_gap, 0.0);
    }

    #[test]
    fn missing_outputs_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(super::super::ExperimentConfig::default(), dir.path(), None, 1).unwrap();
        match report(&run) {
            Err(PipelineError::MissingStageOutput { stage, .. }) => assert_eq!(stage, "train-forecasters"),
            other => panic!("{other:?}"),
        }
        let f = ForecastSummary {
            eval_windows: 0,
            reports: Vec::new(),
        };
        write_json(&run.layout.forecast().join("metrics.json"), &f).unwrap();
        match report(&run) {
            Err(PipelineError::MissingStageOutput { stage, .. }) => assert_eq!(stage, "dispatch"),
            other => panic!("{other:?}"),
        }
    }
}
