//! Multi-channel power series: CSV ingest, resampling, normalization,
//! chronological splitting and sliding-window datasets.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Load,
    Pv,
    Total,
}

/// One column of a frame. Values are always watts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub kind: ChannelKind,
}

impl ChannelSpec {
    pub fn new(name: impl Into<String>, kind: ChannelKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed csv: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate channel `{0}`")]
    DuplicateChannel(String),
    #[error("line {line}: timestamps are not strictly increasing")]
    NonMonotonicTimestamps { line: usize },
    #[error("line {line}: spacing {got} s is not a multiple of the {expected} s period")]
    InconsistentPeriod { line: usize, expected: i64, got: i64 },
    #[error("line {line}: unparseable timestamp `{value}`")]
    BadTimestamp { line: usize, value: String },
    #[error("unparseable values on lines {lines:?}")]
    BadValues { lines: Vec<usize> },
    #[error("need at least {need} data rows, found {found}")]
    TooFewRows { need: usize, found: usize },
    #[error("target period {target} s is not a positive multiple of {period} s")]
    IncompatiblePeriod { period: i64, target: i64 },
    #[error("partition is empty")]
    EmptyPartition,
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("frame has {len} steps, need at least {need}")]
    FrameTooShort { len: usize, need: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("window lengths must be positive (n={n}, m={m})")]
    InvalidWindow { n: usize, m: usize },
    #[error("dataset cache: {0}")]
    Cache(String),
}

/// Aligned channels on a constant grid `start + i·period`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesFrame {
    channels: Vec<ChannelSpec>,
    /// Unix seconds of row 0.
    start: i64,
    /// Seconds between rows.
    period: i64,
    /// Row-major `[steps × channels]`.
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl SeriesFrame {
    pub fn new(
        channels: Vec<ChannelSpec>,
        start: i64,
        period: i64,
        values: Vec<f64>,
        missing: Vec<bool>,
    ) -> Result<Self, DataError> {
        if channels.is_empty() {
            return Err(DataError::InvalidFrame("no channels".into()));
        }
        for (i, c) in channels.iter().enumerate() {
            if channels[..i].iter().any(|o| o.name == c.name) {
                return Err(DataError::DuplicateChannel(c.name.clone()));
            }
        }
        if period <= 0 {
            return Err(DataError::InvalidFrame(format!("period {period} s")));
        }
        if values.len() % channels.len() != 0 || missing.len() != values.len() {
            return Err(DataError::InvalidFrame(format!(
                "{} values and {} flags for {} channels",
                values.len(),
                missing.len(),
                channels.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::InvalidFrame(format!("non-finite value at flat index {i}")));
        }
        Ok(Self {
            channels,
            start,
            period,
            values,
            missing,
        })
    }

    /// Frame from complete rows, nothing flagged missing.
    pub fn from_rows(channels: Vec<ChannelSpec>, start: i64, period: i64, rows: &[Vec<f64>]) -> Result<Self, DataError> {
        let width = channels.len();
        if let Some(r) = rows.iter().find(|r| r.len() != width) {
            return Err(DataError::InvalidFrame(format!("row of width {} for {width} channels", r.len())));
        }
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        let missing = vec![false; values.len()];
        Self::new(channels, start, period, values, missing)
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn period(&self) -> i64 {
        self.period
    }

    pub fn timestamp(&self, row: usize) -> i64 {
        self.start + row as i64 * self.period
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels.len() + channel]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.channels.len();
        &self.values[row * c..(row + 1) * c]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.value(r, channel)).collect()
    }

    pub fn is_missing(&self, row: usize, channel: usize) -> bool {
        self.missing[row * self.channels.len() + channel]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Rows `range` as a new frame.
    pub fn slice(&self, range: Range<usize>) -> SeriesFrame {
        let c = self.channels.len();
        SeriesFrame {
            channels: self.channels.clone(),
            start: self.timestamp(range.start),
            period: self.period,
            values: self.values[range.start * c..range.end * c].to_vec(),
            missing: self.missing[range.start * c..range.end * c].to_vec(),
        }
    }

    fn with_values(&self, values: Vec<f64>) -> SeriesFrame {
        SeriesFrame {
            channels: self.channels.clone(),
            start: self.start,
            period: self.period,
            values,
            missing: self.missing.clone(),
        }
    }
}

/// Monday = 0 … Sunday = 6.
pub fn day_of_week(unix_seconds: i64) -> u8 {
    DateTime::from_timestamp(unix_seconds, 0)
        .map(|d| d.weekday().num_days_from_monday() as u8)
        .unwrap_or(0)
}

/// Seconds since local midnight (UTC).
pub fn second_of_day(unix_seconds: i64) -> i64 {
    unix_seconds.rem_euclid(86_400)
}

/// Epoch seconds (integer or decimal) or ISO-8601 (with offset, or naive
/// and read as UTC).
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    let s = raw.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then(|| v.round() as i64);
    }
    if let Ok(d) = DateTime::parse_from_rfc3339(s) {
        return Some(d.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(d) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(d.and_utc().timestamp());
        }
    }
    None
}

fn is_missing_token(s: &str) -> bool {
    matches!(s, "" | "nan" | "NaN" | "NA" | "na" | "null" | "NULL")
}

/// Reads `timestamp,<channel>...` CSV. Columns are matched to `schema` by
/// name; extra columns are ignored. Missing cells and whole missing rows
/// (gaps that are whole multiples of the period) are forward-filled and
/// flagged; cells before the first observation fill with 0. Negative
/// readings clamp to 0.
pub fn load_csv(path: &Path, schema: &[ChannelSpec]) -> Result<SeriesFrame, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, schema).map_err(|e| match e {
        DataError::Csv { message, .. } => DataError::Csv {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn read_csv<R: Read>(reader: R, schema: &[ChannelSpec]) -> Result<SeriesFrame, DataError> {
    let csv_err = |e: csv::Error| DataError::Csv {
        path: PathBuf::new(),
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.get(0) != Some("timestamp") {
        return Err(DataError::MissingColumn("timestamp".into()));
    }
    let cols: Vec<usize> = schema
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == c.name)
                .ok_or_else(|| DataError::MissingColumn(c.name.clone()))
        })
        .collect::<Result<_, _>>()?;
    let width = schema.len();

    let mut stamps = Vec::new();
    let mut cells: Vec<Option<f64>> = Vec::new();
    let mut bad_lines = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let ts_raw = rec.get(0).unwrap_or("");
        let ts = parse_timestamp(ts_raw).ok_or_else(|| DataError::BadTimestamp {
            line,
            value: ts_raw.to_string(),
        })?;
        stamps.push((ts, line));
        let mut bad = false;
        for &col in &cols {
            let raw = rec.get(col).unwrap_or("");
            if is_missing_token(raw) {
                cells.push(None);
            } else {
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => cells.push(Some(v)),
                    _ => {
                        bad = true;
                        cells.push(None);
                    }
                }
            }
        }
        if bad {
            bad_lines.push(line);
        }
    }
    if !bad_lines.is_empty() {
        return Err(DataError::BadValues { lines: bad_lines });
    }
    if stamps.len() < 2 {
        return Err(DataError::TooFewRows {
            need: 2,
            found: stamps.len(),
        });
    }
    let period = stamps[1].0 - stamps[0].0;
    if period <= 0 {
        return Err(DataError::NonMonotonicTimestamps { line: stamps[1].1 });
    }

    // Expand onto the regular grid.
    let mut grid: Vec<Option<f64>> = Vec::with_capacity(cells.len());
    grid.extend_from_slice(&cells[..width]);
    for k in 1..stamps.len() {
        let (ts, line) = stamps[k];
        let gap = ts - stamps[k - 1].0;
        if gap <= 0 {
            return Err(DataError::NonMonotonicTimestamps { line });
        }
        let steps = (gap as f64 / period as f64).round() as i64;
        if steps < 1 || (gap - steps * period).abs() as f64 > 0.01 * period as f64 {
            return Err(DataError::InconsistentPeriod {
                line,
                expected: period,
                got: gap,
            });
        }
        for _ in 1..steps {
            grid.extend(std::iter::repeat_n(None, width));
        }
        grid.extend_from_slice(&cells[k * width..(k + 1) * width]);
    }

    let mut values = Vec::with_capacity(grid.len());
    let mut missing = Vec::with_capacity(grid.len());
    let mut last = vec![0.0; width];
    for (i, cell) in grid.into_iter().enumerate() {
        let c = i % width;
        match cell {
            Some(v) => {
                let v = v.max(0.0);
                last[c] = v;
                values.push(v);
                missing.push(false);
            }
            None => {
                values.push(last[c]);
                missing.push(true);
            }
        }
    }
    SeriesFrame::new(schema.to_vec(), stamps[0].0, period, values, missing)
}

/// Writes a frame as `timestamp,<channel>...` with epoch-second stamps.
pub fn write_csv<W: Write>(frame: &SeriesFrame, writer: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp".to_string()];
    header.extend(frame.channel_names());
    w.write_record(&header)?;
    for r in 0..frame.len() {
        let mut rec = vec![frame.timestamp(r).to_string()];
        rec.extend(frame.row(r).iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()
}

/// Bucket means over `target_period / period` consecutive rows; a trailing
/// partial bucket is dropped. A bucket is flagged missing if any member was.
pub fn resample_mean(frame: &SeriesFrame, target_period: i64) -> Result<SeriesFrame, DataError> {
    let period = frame.period;
    if target_period <= 0 || target_period % period != 0 {
        return Err(DataError::IncompatiblePeriod {
            period,
            target: target_period,
        });
    }
    let k = (target_period / period) as usize;
    let width = frame.num_channels();
    let buckets = frame.len() / k;
    let mut values = Vec::with_capacity(buckets * width);
    let mut missing = Vec::with_capacity(buckets * width);
    for b in 0..buckets {
        for c in 0..width {
            let mut sum = 0.0;
            let mut flagged = false;
            for r in b * k..(b + 1) * k {
                sum += frame.value(r, c);
                flagged |= frame.is_missing(r, c);
            }
            values.push(sum / k as f64);
            missing.push(flagged);
        }
    }
    Ok(SeriesFrame {
        channels: frame.channels.clone(),
        start: frame.start,
        period: target_period,
        values,
        missing,
    })
}

/// Per-channel min/max used for scaling and for nRMSE ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub channels: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub const NORMALIZED_FLOOR: f64 = -0.5;
pub const NORMALIZED_CEIL: f64 = 1.5;

impl NormalizationParams {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn is_constant(&self, channel: usize) -> bool {
        self.max[channel] == self.min[channel]
    }

    pub fn range(&self, channel: usize) -> (f64, f64) {
        (self.min[channel], self.max[channel])
    }

    pub fn normalize_value(&self, channel: usize, v: f64) -> f64 {
        if self.is_constant(channel) {
            return 0.0;
        }
        let (lo, hi) = self.range(channel);
        ((v - lo) / (hi - lo)).clamp(NORMALIZED_FLOOR, NORMALIZED_CEIL)
    }

    pub fn denormalize_value(&self, channel: usize, v: f64) -> f64 {
        let (lo, hi) = self.range(channel);
        lo + v * (hi - lo)
    }

    fn check(&self, frame: &SeriesFrame) -> Result<(), DataError> {
        if self.channels != frame.channel_names() {
            return Err(DataError::ChannelMismatch(format!(
                "params {:?}, frame {:?}",
                self.channels,
                frame.channel_names()
            )));
        }
        Ok(())
    }
}

/// Min/max per channel over `rows` only.
pub fn fit_normalization(frame: &SeriesFrame, rows: Range<usize>) -> Result<NormalizationParams, DataError> {
    if rows.is_empty() || rows.end > frame.len() {
        return Err(DataError::EmptyPartition);
    }
    let width = frame.num_channels();
    let mut min = vec![f64::INFINITY; width];
    let mut max = vec![f64::NEG_INFINITY; width];
    for r in rows {
        for (c, &v) in frame.row(r).iter().enumerate() {
            min[c] = min[c].min(v);
            max[c] = max[c].max(v);
        }
    }
    Ok(NormalizationParams {
        channels: frame.channel_names(),
        min,
        max,
    })
}

pub fn normalize(frame: &SeriesFrame, params: &NormalizationParams) -> Result<SeriesFrame, DataError> {
    params.check(frame)?;
    let width = frame.num_channels();
    let values = frame
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| params.normalize_value(i % width, v))
        .collect();
    Ok(frame.with_values(values))
}

pub fn denormalize(frame: &SeriesFrame, params: &NormalizationParams) -> Result<SeriesFrame, DataError> {
    params.check(frame)?;
    let width = frame.num_channels();
    let values = frame
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| params.denormalize_value(i % width, v))
        .collect();
    Ok(frame.with_values(values))
}

/// Chronological train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            val_frac: 0.2,
            test_frac: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, f) in [
            ("train_frac", self.train_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(DataError::InvalidSplit(format!("{name} = {f} is outside (0, 1)")));
            }
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplit(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Train gets `floor(len·train_frac)` rows, validation
    /// `floor(len·val_frac)`, test the remainder. The 1e-9 slack keeps
    /// products like `10·0.7` from flooring to 6.
    pub fn bounds(&self, len: usize) -> [Range<usize>; 3] {
        let train = ((len as f64 * self.train_frac) + 1e-9).floor() as usize;
        let val = ((len as f64 * self.val_frac) + 1e-9).floor() as usize;
        let train = train.min(len);
        let val = val.min(len - train);
        [0..train, train..train + val, train + val..len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

/// Stride-1 windows over one partition. Window `i` reads rows
/// `start(i) .. start(i)+n` as input and the following `m` rows as target;
/// all indices are rows of the source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub n: usize,
    pub m: usize,
    pub partition: Partition,
    num_channels: usize,
    frame_start: i64,
    period: i64,
    /// First frame row held in `segment`.
    offset: usize,
    /// Partition rows, row-major.
    segment: Vec<f64>,
    segment_missing: Vec<bool>,
    starts: Vec<usize>,
    day_of_week: Vec<u8>,
}

impl WindowedDataset {
    fn build(frame: &SeriesFrame, rows: Range<usize>, n: usize, m: usize, partition: Partition) -> Self {
        let c = frame.num_channels();
        let count = rows.len().saturating_sub(n + m - 1);
        let starts: Vec<usize> = (0..count).map(|i| rows.start + i).collect();
        let day_of_week = starts.iter().map(|&s| day_of_week(frame.timestamp(s + n))).collect();
        WindowedDataset {
            n,
            m,
            partition,
            num_channels: c,
            frame_start: frame.start,
            period: frame.period,
            offset: rows.start,
            segment: frame.values[rows.start * c..rows.end * c].to_vec(),
            segment_missing: frame.missing[rows.start * c..rows.end * c].to_vec(),
            starts,
            day_of_week,
        }
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn period(&self) -> i64 {
        self.period
    }

    /// Unix seconds of frame row `row`.
    pub fn timestamp(&self, row: usize) -> i64 {
        self.frame_start + row as i64 * self.period
    }

    /// Frame rows covered by this partition.
    pub fn rows(&self) -> Range<usize> {
        self.offset..self.offset + self.segment.len() / self.num_channels
    }

    /// `[n × channels]` normalized input, row-major.
    pub fn input(&self, i: usize) -> &[f64] {
        let c = self.num_channels;
        let s = self.starts[i] - self.offset;
        &self.segment[s * c..(s + self.n) * c]
    }

    /// `[m × channels]` normalized target, row-major.
    pub fn target(&self, i: usize) -> &[f64] {
        let c = self.num_channels;
        let s = self.starts[i] - self.offset + self.n;
        &self.segment[s * c..(s + self.m) * c]
    }

    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn day_of_week(&self, i: usize) -> u8 {
        self.day_of_week[i]
    }

    /// Unix seconds of the first target step.
    pub fn target_time(&self, i: usize) -> i64 {
        self.frame_start + (self.starts[i] + self.n) as i64 * self.period
    }

    /// Whether any input or target cell of window `i` was imputed.
    pub fn has_imputed(&self, i: usize) -> bool {
        let c = self.num_channels;
        let s = self.starts[i] - self.offset;
        self.segment_missing[s * c..(s + self.n + self.m) * c].iter().any(|&m| m)
    }

    /// Index of the window starting at frame row `start`, if present.
    pub fn find(&self, start: usize) -> Option<usize> {
        let first = *self.starts.first()?;
        let i = start.checked_sub(first)?;
        (i < self.starts.len()).then_some(i)
    }

    /// Raw partition row `row` (frame index).
    pub fn frame_row(&self, row: usize) -> &[f64] {
        let c = self.num_channels;
        let s = row - self.offset;
        &self.segment[s * c..(s + 1) * c]
    }

    /// Keeps every `stride`-th window; used to thin evaluation sets.
    pub fn thinned(&self, stride: usize) -> WindowedDataset {
        let stride = stride.max(1);
        let mut out = self.clone();
        out.starts = self.starts.iter().step_by(stride).copied().collect();
        out.day_of_week = self.day_of_week.iter().step_by(stride).copied().collect();
        out
    }
}

/// Splits `frame` chronologically and windows each partition
/// independently, so no window straddles a boundary.
pub fn make_windows(
    frame: &SeriesFrame,
    n: usize,
    m: usize,
    split: &SplitSpec,
) -> Result<[WindowedDataset; 3], DataError> {
    if n == 0 || m == 0 {
        return Err(DataError::InvalidWindow { n, m });
    }
    split.validate()?;
    if frame.len() < n + m {
        return Err(DataError::FrameTooShort {
            len: frame.len(),
            need: n + m,
        });
    }
    let [tr, va, te] = split.bounds(frame.len());
    Ok([
        WindowedDataset::build(frame, tr, n, m, Partition::Train),
        WindowedDataset::build(frame, va, n, m, Partition::Val),
        WindowedDataset::build(frame, te, n, m, Partition::Test),
    ])
}

/// Windows over the whole frame as a single partition.
pub fn windows_whole(frame: &SeriesFrame, n: usize, m: usize) -> Result<WindowedDataset, DataError> {
    if n == 0 || m == 0 {
        return Err(DataError::InvalidWindow { n, m });
    }
    if frame.len() < n + m {
        return Err(DataError::FrameTooShort {
            len: frame.len(),
            need: n + m,
        });
    }
    Ok(WindowedDataset::build(frame, 0..frame.len(), n, m, Partition::Train))
}

pub const CACHE_MAGIC: &[u8; 8] = b"SQHMWIN\0";
pub const CACHE_SCHEMA: &str = "seqhems.windows.v1";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    schema: String,
    n: usize,
    m: usize,
    partition: Partition,
    num_channels: usize,
    frame_start: i64,
    period: i64,
    offset: usize,
    segment_rows: usize,
    starts: Vec<usize>,
    day_of_week: Vec<u8>,
    missing_cells: Vec<usize>,
}

impl WindowedDataset {
    /// Binary cache: magic, `u32` header length, JSON header carrying the
    /// schema version, then the partition values as little-endian `f64`.
    pub fn write_cache<W: Write>(&self, w: W) -> io::Result<()> {
        let mut w = BufWriter::new(w);
        let header = CacheHeader {
            schema: CACHE_SCHEMA.into(),
            n: self.n,
            m: self.m,
            partition: self.partition,
            num_channels: self.num_channels,
            frame_start: self.frame_start,
            period: self.period,
            offset: self.offset,
            segment_rows: self.segment.len() / self.num_channels,
            starts: self.starts.clone(),
            day_of_week: self.day_of_week.clone(),
            missing_cells: self
                .segment_missing
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(io::Error::other)?;
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for v in &self.segment {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_cache<R: Read>(r: R) -> Result<Self, DataError> {
        let mut r = BufReader::new(r);
        let io_err = |e: io::Error| DataError::Cache(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != CACHE_MAGIC {
            return Err(DataError::Cache("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(io_err)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(io_err)?;
        let h: CacheHeader = serde_json::from_slice(&json).map_err(|e| DataError::Cache(e.to_string()))?;
        if h.schema != CACHE_SCHEMA {
            return Err(DataError::Cache(format!("schema `{}`, expected `{CACHE_SCHEMA}`", h.schema)));
        }
        let cells = h.segment_rows * h.num_channels;
        let mut segment = Vec::with_capacity(cells);
        let mut b = [0u8; 8];
        for _ in 0..cells {
            r.read_exact(&mut b).map_err(io_err)?;
            segment.push(f64::from_le_bytes(b));
        }
        let mut segment_missing = vec![false; cells];
        for i in h.missing_cells {
            *segment_missing
                .get_mut(i)
                .ok_or_else(|| DataError::Cache(format!("missing-cell index {i} out of range")))? = true;
        }
        if h.starts.len() != h.day_of_week.len()
            || h.starts
                .iter()
                .any(|&s| s < h.offset || s + h.n + h.m > h.offset + h.segment_rows)
        {
            return Err(DataError::Cache("window table inconsistent with segment".into()));
        }
        Ok(WindowedDataset {
            n: h.n,
            m: h.m,
            partition: h.partition,
            num_channels: h.num_channels,
            frame_start: h.frame_start,
            period: h.period,
            offset: h.offset,
            segment,
            segment_missing,
            starts: h.starts,
            day_of_week: h.day_of_week,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_channels() -> Vec<ChannelSpec> {
        vec![
            ChannelSpec::new("pv", ChannelKind::Pv),
            ChannelSpec::new("dishwasher", ChannelKind::Load),
        ]
    }

    fn one_channel() -> Vec<ChannelSpec> {
        vec![ChannelSpec::new("x", ChannelKind::Load)]
    }

    fn series(values: &[f64], period: i64) -> SeriesFrame {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        SeriesFrame::from_rows(one_channel(), 0, period, &rows).unwrap()
    }

    #[test]
    fn parses_three_row_csv() {
        let csv = "timestamp,pv,dishwasher\n0,10,0\n300,12.5,2000\n600,0,0\n";
        let f = read_csv(csv.as_bytes(), &two_channels()).unwrap();
        assert_eq!(f.period(), 300);
        assert_eq!(f.num_channels(), 2);
        assert_eq!(f.len(), 3);
        assert_eq!(f.row(1), &[12.5, 2000.0]);
        assert_eq!(f.missing_count(), 0);
    }

    #[test]
    fn parses_iso_timestamps_and_reorders_columns() {
        let csv = "timestamp,dishwasher,extra,pv\n2021-03-01T00:00:00Z,1,9,2\n2021-03-01 00:05:00,3,9,4\n";
        let f = read_csv(csv.as_bytes(), &two_channels()).unwrap();
        assert_eq!(f.period(), 300);
        assert_eq!(f.row(0), &[2.0, 1.0]);
        assert_eq!(day_of_week(f.start()), 0);
    }

    #[test]
    fn out_of_order_timestamps_are_rejected() {
        let csv = "timestamp,pv,dishwasher\n0,1,1\n300,1,1\n200,1,1\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &two_channels()),
            Err(DataError::NonMonotonicTimestamps { line: 4 })
        ));
    }

    #[test]
    fn missing_cell_is_forward_filled_and_flagged() {
        let csv = "timestamp,pv,dishwasher\n0,1,50\n300,2,\n600,3,70\n";
        let f = read_csv(csv.as_bytes(), &two_channels()).unwrap();
        assert_eq!(f.value(1, 1), 50.0);
        assert!(f.is_missing(1, 1));
        assert!(!f.is_missing(1, 0));
        assert_eq!(f.missing_count(), 1);
    }

    #[test]
    fn whole_period_gaps_are_filled() {
        let csv = "timestamp,pv,dishwasher\n0,1,1\n300,2,2\n1200,5,5\n";
        let f = read_csv(csv.as_bytes(), &two_channels()).unwrap();
        assert_eq!(f.len(), 5);
        assert_eq!(f.row(3), &[2.0, 2.0]);
        assert!(f.is_missing(2, 0) && f.is_missing(3, 1));
        assert_eq!(f.row(4), &[5.0, 5.0]);
    }

    #[test]
    fn irregular_spacing_is_rejected() {
        let csv = "timestamp,pv,dishwasher\n0,1,1\n300,2,2\n750,5,5\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &two_channels()),
            Err(DataError::InconsistentPeriod { line: 4, .. })
        ));
        // within 1 %: accepted
        let csv = "timestamp,pv,dishwasher\n0,1,1\n300,2,2\n602,5,5\n";
        assert_eq!(read_csv(csv.as_bytes(), &two_channels()).unwrap().len(), 3);
    }

    #[test]
    fn bad_values_report_every_line() {
        let csv = "timestamp,pv,dishwasher\n0,1,x\n300,2,2\n600,y,3\n";
        match read_csv(csv.as_bytes(), &two_channels()) {
            Err(DataError::BadValues { lines }) => assert_eq!(lines, vec![2, 4]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "timestamp,pv\n0,1\n300,2\n";
        match read_csv(csv.as_bytes(), &two_channels()) {
            Err(DataError::MissingColumn(c)) => assert_eq!(c, "dishwasher"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_csv("time,pv,dishwasher\n0,1,1\n".as_bytes(), &two_channels()),
            Err(DataError::MissingColumn(_))
        ));
    }

    #[test]
    fn negative_readings_clamp_to_zero() {
        let csv = "timestamp,pv,dishwasher\n0,-3,1\n300,2,-0.5\n";
        let f = read_csv(csv.as_bytes(), &two_channels()).unwrap();
        assert_eq!(f.row(0), &[0.0, 1.0]);
        assert_eq!(f.row(1), &[2.0, 0.0]);
    }

    #[test]
    fn csv_round_trip() {
        let f = SeriesFrame::from_rows(two_channels(), 1_600_000_000, 600, &[vec![1.5, 0.0], vec![2.0, 1e-3]]).unwrap();
        let mut buf = Vec::new();
        write_csv(&f, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &two_channels()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn resample_examples() {
        let r = resample_mean(&series(&[100.0, 200.0], 300), 600).unwrap();
        assert_eq!(r.values(), &[150.0]);
        assert_eq!(r.period(), 600);
        let r = resample_mean(&series(&[5.0; 4], 300), 600).unwrap();
        assert_eq!(r.values(), &[5.0, 5.0]);
        let r = resample_mean(&series(&[1.0, 2.0, 3.0, 4.0, 5.0], 300), 600).unwrap();
        assert_eq!(r.values(), &[1.5, 3.5]);
        assert!(matches!(
            resample_mean(&series(&[1.0; 4], 300), 450),
            Err(DataError::IncompatiblePeriod { .. })
        ));
    }

    #[test]
    fn normalization_examples() {
        let f = series(&[0.0, 7500.0, 15000.0], 600);
        let p = fit_normalization(&f, 0..3).unwrap();
        assert_eq!((p.min[0], p.max[0]), (0.0, 15000.0));
        let n = normalize(&f, &p).unwrap();
        assert_eq!(n.values(), &[0.0, 0.5, 1.0]);
        let c = series(&[42.0; 3], 600);
        let pc = fit_normalization(&c, 0..3).unwrap();
        assert!(pc.is_constant(0));
        assert_eq!(normalize(&c, &pc).unwrap().values(), &[0.0; 3]);
        assert!(matches!(fit_normalization(&f, 1..1), Err(DataError::EmptyPartition)));
        // only the fitting rows matter
        let p = fit_normalization(&f, 0..2).unwrap();
        assert_eq!(p.max[0], 7500.0);
        assert_eq!(normalize(&f, &p).unwrap().value(2, 0), 1.5);
    }

    #[test]
    fn normalization_is_per_channel() {
        let f = SeriesFrame::from_rows(two_channels(), 0, 600, &[vec![0.0, 100.0], vec![10.0, 300.0]]).unwrap();
        let p = fit_normalization(&f, 0..2).unwrap();
        assert_eq!(p.min, vec![0.0, 100.0]);
        assert_eq!(p.max, vec![10.0, 300.0]);
        let other = series(&[1.0], 600);
        assert!(matches!(normalize(&other, &p), Err(DataError::ChannelMismatch(_))));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let bad = SplitSpec {
            train_frac: 0.8,
            val_frac: 0.2,
            test_frac: 0.1,
        };
        assert!(matches!(bad.validate(), Err(DataError::InvalidSplit(_))));
        assert!(SplitSpec::default().validate().is_ok());
        assert_eq!(SplitSpec::default().bounds(10), [0..7, 7..9, 9..10]);
    }

    fn single_partition(frame: &SeriesFrame, n: usize, m: usize) -> WindowedDataset {
        windows_whole(frame, n, m).unwrap()
    }

    #[test]
    fn window_counting_examples() {
        let f = series(&vec![1.0; 150], 600);
        let w = single_partition(&f, 144, 6);
        assert_eq!(w.len(), 1);
        let f = series(&vec![1.0; 151], 600);
        let w = single_partition(&f, 144, 6);
        assert_eq!(w.starts(), &[0, 1]);
        assert!(matches!(
            windows_whole(&series(&[1.0; 149], 600), 144, 6),
            Err(DataError::FrameTooShort { len: 149, need: 150 })
        ));
    }

    #[test]
    fn windows_slice_inputs_and_targets() {
        let vals: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let w = single_partition(&series(&vals, 600), 3, 2);
        assert_eq!(w.input(2), &[2.0, 3.0, 4.0]);
        assert_eq!(w.target(2), &[5.0, 6.0]);
        assert_eq!(w.len(), 6);
    }

    #[test]
    fn day_of_week_comes_from_first_target_step() {
        // 2021-03-07 is a Sunday; the first target lands on Monday 00:00.
        let sunday_2300 = 1_615_158_000;
        let f = series(&[0.0; 4], 3600);
        let f = SeriesFrame::new(f.channels().to_vec(), sunday_2300, 3600, vec![0.0; 4], vec![false; 4]).unwrap();
        assert_eq!(day_of_week(sunday_2300), 6);
        let w = single_partition(&f, 1, 1);
        assert_eq!(w.day_of_week(0), 0);
    }

    #[test]
    fn full_scale_partition_counts_follow_floor_rule() {
        let len = 594 * 144;
        let f = series(&vec![0.0; len], 600);
        let split = SplitSpec::default();
        let ws = make_windows(&f, 144, 6, &split).unwrap();
        let counts = [len * 7 / 10, len * 2 / 10, len - len * 7 / 10 - len * 2 / 10];
        assert_eq!(counts, [59875, 17107, 8554]);
        for (w, c) in ws.iter().zip(counts) {
            assert_eq!(w.rows().len(), c);
            assert_eq!(w.len(), c - 149);
            assert!(w.starts().iter().all(|&s| s >= w.rows().start && s + 150 <= w.rows().end));
        }
    }

    #[test]
    fn cache_round_trip() {
        let vals: Vec<f64> = (0..40).map(|v| (v as f64).sin()).collect();
        let mut missing = vec![false; 40];
        missing[33] = true;
        let f = SeriesFrame::new(one_channel(), 86_400, 600, vals, missing).unwrap();
        let ws = make_windows(&f, 4, 2, &SplitSpec::default()).unwrap();
        for w in &ws {
            let mut buf = Vec::new();
            w.write_cache(&mut buf).unwrap();
            let back = WindowedDataset::read_cache(buf.as_slice()).unwrap();
            assert_eq!(&back, w);
        }
        let mut buf = Vec::new();
        ws[0].write_cache(&mut buf).unwrap();
        let s = String::from_utf8_lossy(&buf).replace(CACHE_SCHEMA, "seqhems.windows.v0");
        assert!(WindowedDataset::read_cache(s.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn resample_preserves_energy(vals in prop::collection::vec(0.0f64..5000.0, 1..200), k in 1usize..7) {
            let f = series(&vals, 60);
            let r = resample_mean(&f, 60 * k as i64).unwrap();
            let kept = vals.len() / k * k;
            let input: f64 = vals[..kept].iter().sum();
            let output: f64 = r.values().iter().sum::<f64>() * k as f64;
            prop_assert!((input - output).abs() <= 1e-9 * input.abs().max(1.0));
        }

        #[test]
        fn normalize_round_trip(vals in prop::collection::vec(0.0f64..15000.0, 2..100)) {
            let f = series(&vals, 600);
            let p = fit_normalization(&f, 0..vals.len()).unwrap();
            let back = denormalize(&normalize(&f, &p).unwrap(), &p).unwrap();
            for (a, b) in back.values().iter().zip(&vals) {
                if !p.is_constant(0) {
                    prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }
        }

        #[test]
        fn partitions_never_leak(len in 20usize..400, n in 1usize..8, m in 1usize..4) {
            let f = series(&vec![0.0; len], 600);
            let ws = make_windows(&f, n, m, &SplitSpec::default()).unwrap();
            let bounds = SplitSpec::default().bounds(len);
            for (w, r) in ws.iter().zip(&bounds) {
                prop_assert_eq!(w.len(), r.len().saturating_sub(n + m - 1));
                for &s in w.starts() {
                    prop_assert!(s >= r.start && s + n + m <= r.end);
                }
            }
            for &s in ws[1].starts().iter().chain(ws[2].starts()) {
                prop_assert!(s >= bounds[0].end);
            }
        }
    }
}
