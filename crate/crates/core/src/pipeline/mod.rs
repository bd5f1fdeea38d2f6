//! File-composed experiment stages: synthetic data, ingest, forecaster
//! training, dispatch evaluation and the consolidated report.

pub mod config;
pub mod dispatch;
pub mod forecasters;
pub mod ingest;
pub mod report;
pub mod synth;

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("missing output of stage `{stage}`: {path} (run `{stage}` first)")]
    MissingStageOutput { stage: &'static str, path: PathBuf },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] crate::timeseries::DataError),
    #[error(transparent)]
    Forecast(#[from] crate::forecast::ForecastError),
    #[error("varma: {0}")]
    Varma(#[from] crate::varma::VarmaError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("day {day}: {message}")]
    Day { day: String, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl PipelineError {
    /// Process exit code: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
        move |source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, e: impl std::fmt::Display) -> PipelineError {
        PipelineError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

/// Writes `bytes` to `path` through a sibling temp file and a rename, so a
/// reader never sees a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(PipelineError::io(&tmp))?;
    f.write_all(bytes).map_err(PipelineError::io(&tmp))?;
    f.sync_all().map_err(PipelineError::io(&tmp))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(PipelineError::io(path))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| PipelineError::format(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Reads a stage artifact; absence is reported as `MissingStageOutput`.
pub fn read_stage_file(stage: &'static str, path: &Path) -> Result<Vec<u8>, PipelineError> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(PipelineError::MissingStageOutput {
            stage,
            path: path.to_path_buf(),
        }),
        Err(e) => Err(PipelineError::Io {
            path: path.to_path_buf(),
            source: e,
        }),
    }
}

pub fn read_stage_json<T: serde::de::DeserializeOwned>(stage: &'static str, path: &Path) -> Result<T, PipelineError> {
    let bytes = read_stage_file(stage, path)?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::format(path, e))
}

/// Artifact locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn ingest(&self) -> PathBuf {
        self.root.join("ingest")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn forecast(&self) -> PathBuf {
        self.root.join("forecast")
    }

    pub fn dispatch(&self) -> PathBuf {
        self.root.join("dispatch")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Resolved paths and effective settings for one invocation.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub data_path: PathBuf,
    pub layout: Layout,
    /// Worker threads for parallel stages; results never depend on it.
    pub jobs: usize,
}

impl Run {
    /// `base` is the directory relative paths in the config resolve from.
    pub fn new(config: ExperimentConfig, base: &Path, out: Option<PathBuf>, jobs: usize) -> Result<Self, PipelineError> {
        config.validate()?;
        if jobs == 0 {
            return Err(PipelineError::Validation("--jobs must be at least 1".into()));
        }
        let data_path = config::resolve(base, &config.data.path);
        let root = out.unwrap_or_else(|| config::resolve(base, &config.output_dir));
        Ok(Self {
            config,
            data_path,
            layout: Layout::new(root),
            jobs,
        })
    }

    /// Runs `f` on a pool of `jobs` threads.
    pub fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| PipelineError::Validation(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}
