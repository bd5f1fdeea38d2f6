//! `synth-data` and `ingest`: raw CSV to resampled, normalized, windowed
//! cache files keyed by an input hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_stage_file, read_stage_json, write_atomic, write_json, PipelineError, Run};
use crate::timeseries::{
    fit_normalization, make_windows, normalize, read_csv, resample_mean, write_csv, DataError, NormalizationParams,
    Partition, SeriesFrame, WindowedDataset,
};

pub const MANIFEST_SCHEMA: &str = "seqhems.ingest.v1";
const STAGE: &str = "ingest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub schema: String,
    /// Hash of the raw data bytes and every setting ingest depends on.
    pub input_hash: String,
    pub period_seconds: i64,
    pub rows: usize,
    pub partition_rows: [(usize, usize); 3],
    pub windows: [usize; 3],
    /// `(file name, sha256)` of every artifact written.
    pub files: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestSummary {
    pub cache_hit: bool,
    pub rows: usize,
    pub windows: [usize; 3],
}

/// Everything downstream stages read back from the ingest cache.
#[derive(Debug, Clone)]
pub struct IngestArtifacts {
    pub manifest: IngestManifest,
    pub norm: NormalizationParams,
    /// Resampled frame in watts.
    pub frame: SeriesFrame,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the seeded synthetic household CSV to the configured data path.
pub fn synth_data(run: &Run) -> Result<usize, PipelineError> {
    let frame = super::synth::generate(&run.config.data.synth, run.config.seed)?;
    let mut buf = Vec::new();
    write_csv(&frame, &mut buf).map_err(PipelineError::io(&run.data_path))?;
    write_atomic(&run.data_path, &buf)?;
    Ok(frame.len())
}

fn input_hash(run: &Run, raw: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(MANIFEST_SCHEMA.as_bytes());
    h.update(Sha256::digest(raw));
    h.update(serde_json::to_vec(&run.config.data.channels).expect("channels serialize"));
    h.update(serde_json::to_vec(&run.config.preprocess).expect("preprocess serializes"));
    hex::encode(h.finalize())
}

fn cache_is_valid(run: &Run, key: &str) -> bool {
    let dir = run.layout.ingest();
    let Ok(m) = read_stage_json::<IngestManifest>(STAGE, &dir.join("manifest.json")) else {
        return false;
    };
    m.schema == MANIFEST_SCHEMA
        && m.input_hash == key
        && m.files.iter().all(|(name, sha)| std::fs::read(dir.join(name)).is_ok_and(|b| sha_hex(&b) == *sha))
}

pub fn ingest(run: &Run) -> Result<IngestSummary, PipelineError> {
    let raw = std::fs::read(&run.data_path).map_err(PipelineError::io(&run.data_path))?;
    let key = input_hash(run, &raw);
    let dir = run.layout.ingest();
    if cache_is_valid(run, &key) {
        let m: IngestManifest = read_stage_json(STAGE, &dir.join("manifest.json"))?;
        log::info!("ingest: cache hit ({})", &key[..12]);
        return Ok(IngestSummary {
            cache_hit: true,
            rows: m.rows,
            windows: m.windows,
        });
    }

    let p = &run.config.preprocess;
    let raw_frame = read_csv(raw.as_slice(), &run.config.data.channels).map_err(|e| match e {
        DataError::Csv { message, .. } => DataError::Csv {
            path: run.data_path.clone(),
            message,
        },
        other => other,
    })?;
    let frame = resample_mean(&raw_frame, p.resample_seconds)?;
    let bounds = p.split.bounds(frame.len());
    let norm = fit_normalization(&frame, bounds[0].clone())?;
    let normalized = normalize(&frame, &norm)?;
    let sets = make_windows(&normalized, p.history_len, p.horizon, &p.split)?;
    for (ds, part) in sets.iter().zip(Partition::ALL) {
        if ds.is_empty() {
            return Err(PipelineError::Validation(format!(
                "{} partition has no windows of {} + {} steps",
                part.name(),
                p.history_len,
                p.horizon
            )));
        }
    }

    let mut files = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<(), PipelineError> {
        write_atomic(&dir.join(name), &bytes)?;
        files.push((name.to_string(), sha_hex(&bytes)));
        Ok(())
    };
    let mut csv = Vec::new();
    write_csv(&frame, &mut csv).map_err(PipelineError::io(&dir))?;
    emit("resampled.csv", csv)?;
    let mut nj = serde_json::to_vec_pretty(&norm).map_err(|e| PipelineError::format(&dir, e))?;
    nj.push(b'\n');
    emit("norm.json", nj)?;
    for (ds, part) in sets.iter().zip(Partition::ALL) {
        let mut buf = Vec::new();
        ds.write_cache(&mut buf).map_err(PipelineError::io(&dir))?;
        emit(&format!("{}.win", part.name()), buf)?;
    }
    let manifest = IngestManifest {
        schema: MANIFEST_SCHEMA.into(),
        input_hash: key,
        period_seconds: frame.period(),
        rows: frame.len(),
        partition_rows: bounds.clone().map(|r| (r.start, r.end)),
        windows: [sets[0].len(), sets[1].len(), sets[2].len()],
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    log::info!(
        "ingest: {} rows at {} s, windows train/val/test {:?}",
        manifest.rows,
        manifest.period_seconds,
        manifest.windows
    );
    Ok(IngestSummary {
        cache_hit: false,
        rows: manifest.rows,
        windows: manifest.windows,
    })
}

pub fn load(run: &Run) -> Result<IngestArtifacts, PipelineError> {
    let dir = run.layout.ingest();
    let manifest: IngestManifest = read_stage_json(STAGE, &dir.join("manifest.json"))?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(PipelineError::format(&dir.join("manifest.json"), "unsupported manifest schema"));
    }
    let norm: NormalizationParams = read_stage_json(STAGE, &dir.join("norm.json"))?;
    let csv = read_stage_file(STAGE, &dir.join("resampled.csv"))?;
    let frame = read_csv(csv.as_slice(), &run.config.data.channels)?;
    let window = |part: Partition| -> Result<WindowedDataset, PipelineError> {
        let path = dir.join(format!("{}.win", part.name()));
        let bytes = read_stage_file(STAGE, &path)?;
        Ok(WindowedDataset::read_cache(bytes.as_slice())?)
    };
    let (train, val, test) = (window(Partition::Train)?, window(Partition::Val)?, window(Partition::Test)?);
    if norm.channels != frame.channel_names() {
        return Err(PipelineError::format(&dir, "normalization channels differ from the configured channels"));
    }
    Ok(IngestArtifacts {
        manifest,
        norm,
        frame,
        train,
        val,
        test,
    })
}
