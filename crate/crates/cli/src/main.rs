//! Command-line driver for the forecasting and dispatch pipeline.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqhems::pipeline::{dispatch, forecasters, ingest, report, ExperimentConfig, PipelineError, Run};

#[derive(Parser)]
#[command(name = "seqhems", version, about = "Appliance/PV forecasting and home energy dispatch pipeline")]
struct Cli {
    /// Experiment config (JSON); built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the config output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; results do not depend on it
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded synthetic household CSV to the data path
    SynthData,
    /// Resample, normalize, split and window the data into the cache
    Ingest,
    /// Train Seq2Seq, LSTM and VARMA; score them with persistence
    TrainForecasters,
    /// Offline Q-learning on forecasts, online test on actuals, DP optimum
    Dispatch,
    /// Consolidate metric and operation outputs
    Report,
    /// Print the default config
    InitConfig,
}

fn load(cli: &Cli) -> Result<Run, PipelineError> {
    let (mut config, base) = match &cli.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (cfg, base)
        }
        None => (ExperimentConfig::default(), PathBuf::from(".")),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Run::new(config, &base, cli.out.clone(), cli.jobs)
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    if let Command::InitConfig = cli.command {
        let text = serde_json::to_string_pretty(&ExperimentConfig::default()).expect("config serializes");
        println!("{text}");
        return Ok(());
    }
    let run = load(cli)?;
    match cli.command {
        Command::SynthData => {
            let rows = ingest::synth_data(&run)?;
            println!("wrote {rows} rows to {}", run.data_path.display());
        }
        Command::Ingest => {
            let s = ingest::ingest(&run)?;
            let state = if s.cache_hit { "cache hit" } else { "written" };
            println!(
                "ingest {state}: {} rows, windows train/val/test {}/{}/{}",
                s.rows, s.windows[0], s.windows[1], s.windows[2]
            );
        }
        Command::TrainForecasters => {
            let s = forecasters::train_forecasters(&run)?;
            for r in &s.reports {
                println!("{:<12} mean wMAPE {:.4}", r.model, r.mean_wmape());
            }
        }
        Command::Dispatch => {
            let rows = dispatch::dispatch(&run)?;
            println!("dispatch: {} rows written to {}", rows.len(), run.layout.dispatch().display());
        }
        Command::Report => {
            let s = report::report(&run)?;
            for o in &s.operation {
                println!("{:<12} mean |predicted - actual| {:.4}", o.forecaster, o.mean_gap);
            }
        }
        Command::InitConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
