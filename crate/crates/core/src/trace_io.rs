//! Oscilloscope-style CSV ingestion into trace ensembles.
//!
//! The accepted dialect is comma separated with optional quoted cells. Any
//! leading rows whose value cell is not numeric (PicoScope writes a name row
//! and a unit row) are skipped; once the first numeric row has been seen a
//! non-numeric value cell is an error.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum relative deviation of any time step from the median step.
pub const TIMEBASE_TOLERANCE: f64 = 0.01;
/// Maximum relative sample-rate disagreement between traces of one set.
pub const RATE_TOLERANCE: f64 = 0.001;
/// Inferred sample rates are rounded to this many significant digits.
const RATE_SIGNIFICANT_DIGITS: i32 = 12;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("NoNumericRows: no numeric rows found in value column {column}")]
    NoNumericRows { column: usize },
    #[error("NonUniformTimebase: step at row {row} deviates {deviation:.3} (relative) from median step")]
    NonUniformTimebase { row: usize, deviation: f64 },
    #[error("MissingSampleRate: no time column and no sample rate override given")]
    MissingSampleRate,
    #[error("MalformedRow: row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("NonFiniteSample: sample {index} is not finite")]
    NonFiniteSample { index: usize },
    #[error("EmptyTrace: a trace needs at least one sample")]
    EmptyTrace,
    #[error("InvalidSampleRate: sample rate must be finite and > 0, got {0}")]
    InvalidSampleRate(f64),
    #[error("TooFewTraces: need at least 2 traces, found {found}")]
    TooFewTraces { found: usize },
    #[error("InconsistentSampleRate: trace {index} has rate {rate} Hz, expected {expected} Hz")]
    InconsistentSampleRate {
        index: usize,
        rate: f64,
        expected: f64,
    },
    #[error("InconsistentLength: trace {index} has {len} samples, expected {expected}")]
    InconsistentLength {
        index: usize,
        len: usize,
        expected: usize,
    },
    #[error("Io: {0}")]
    Io(String),
}

/// One captured waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    samples: Vec<f64>,
    sample_rate_hz: f64,
}

impl Trace {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self, TraceError> {
        if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
            return Err(TraceError::NonFiniteSample { index });
        }
        Self::new_unchecked(samples, sample_rate_hz)
    }

    /// Like [`Trace::new`] but does not reject non-finite samples. Such
    /// traces are reported by [`validate_traceset`].
    pub fn new_unchecked(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self, TraceError> {
        if samples.is_empty() {
            return Err(TraceError::EmptyTrace);
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(TraceError::InvalidSampleRate(sample_rate_hz));
        }
        Ok(Trace {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Returns a copy with every sample multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Trace {
        Trace {
            samples: self.samples.iter().map(|v| v * factor).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    fn truncated(mut self, len: usize) -> Trace {
        self.samples.truncate(len);
        self
    }
}

/// An aligned ensemble of equal-length traces.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    traces: Vec<Trace>,
    label: String,
}

impl TraceSet {
    pub fn new(traces: Vec<Trace>, label: impl Into<String>) -> Result<Self, TraceError> {
        if traces.len() < 2 {
            return Err(TraceError::TooFewTraces {
                found: traces.len(),
            });
        }
        let expected_len = traces[0].len();
        let expected_rate = traces[0].sample_rate_hz();
        for (index, t) in traces.iter().enumerate() {
            if t.len() != expected_len {
                return Err(TraceError::InconsistentLength {
                    index,
                    len: t.len(),
                    expected: expected_len,
                });
            }
            if t.sample_rate_hz() != expected_rate {
                return Err(TraceError::InconsistentSampleRate {
                    index,
                    rate: t.sample_rate_hz(),
                    expected: expected_rate,
                });
            }
        }
        Ok(TraceSet {
            traces,
            label: label.into(),
        })
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn n_traces(&self) -> usize {
        self.traces.len()
    }

    pub fn n_samples(&self) -> usize {
        self.traces[0].len()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.traces[0].sample_rate_hz()
    }

    pub fn scaled(&self, factor: f64) -> TraceSet {
        TraceSet {
            traces: self.traces.iter().map(|t| t.scaled(factor)).collect(),
            label: self.label.clone(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> TraceSet {
        self.label = label.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub time_column: Option<usize>,
    pub value_column: usize,
    pub sample_rate_override: Option<f64>,
}

impl Default for CsvOptions {
    /// Two-column `time,value` layout, as written by [`write_csv_trace`].
    fn default() -> Self {
        CsvOptions {
            time_column: Some(0),
            value_column: 1,
            sample_rate_override: None,
        }
    }
}

fn parse_cell(cell: Option<&str>) -> Option<f64> {
    cell.and_then(|c| c.trim().parse::<f64>().ok())
}

fn round_significant(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (digits - 1 - magnitude).clamp(0, 300) as usize;
    format!("{:.*}", decimals, x).parse().unwrap_or(x)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Parses one waveform from CSV text.
pub fn parse_csv_trace(text: &str, opts: &CsvOptions) -> Result<Trace, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut samples = Vec::new();
    let mut times = Vec::new();
    let mut started = false;

    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| TraceError::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let value = parse_cell(record.get(opts.value_column));
        let time = opts.time_column.map(|c| parse_cell(record.get(c)));
        match (value, time) {
            (Some(v), None) => {
                started = true;
                samples.push(v);
            }
            (Some(v), Some(Some(t))) => {
                started = true;
                samples.push(v);
                times.push(t);
            }
            _ if !started => continue,
            (None, _) => {
                return Err(TraceError::MalformedRow {
                    row,
                    reason: format!("value column {} is not numeric", opts.value_column),
                })
            }
            (Some(_), Some(None)) => {
                return Err(TraceError::MalformedRow {
                    row,
                    reason: "time column is not numeric".into(),
                })
            }
        }
    }

    if samples.is_empty() {
        return Err(TraceError::NoNumericRows {
            column: opts.value_column,
        });
    }
    if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
        return Err(TraceError::NonFiniteSample { index });
    }

    let inferred = if opts.time_column.is_some() && times.len() >= 2 {
        let steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        let mut sorted = steps.clone();
        let dt = median(&mut sorted);
        if !(dt.is_finite() && dt > 0.0) {
            return Err(TraceError::NonUniformTimebase {
                row: 0,
                deviation: f64::INFINITY,
            });
        }
        for (i, step) in steps.iter().enumerate() {
            let deviation = (step - dt).abs() / dt;
            if deviation > TIMEBASE_TOLERANCE {
                return Err(TraceError::NonUniformTimebase {
                    row: i + 1,
                    deviation,
                });
            }
        }
        Some(round_significant(1.0 / dt, RATE_SIGNIFICANT_DIGITS))
    } else {
        None
    };

    let rate = opts
        .sample_rate_override
        .or(inferred)
        .ok_or(TraceError::MissingSampleRate)?;
    Trace::new(samples, rate)
}

/// Writes a trace as a two-column `time,value` CSV with a header and unit row.
///
/// Values use the shortest representation that parses back to the same
/// `f64`, so [`parse_csv_trace`] recovers the samples bit for bit.
pub fn write_csv_trace(trace: &Trace) -> String {
    let mut out = String::with_capacity(trace.len() * 24 + 32);
    out.push_str("Time,Channel A\n(s),(V)\n");
    let fs = trace.sample_rate_hz();
    for (i, v) in trace.samples().iter().enumerate() {
        let t = i as f64 / fs;
        out.push_str(&format!("{t:e},{v:e}\n"));
    }
    out
}

/// Result of loading a directory of CSV traces.
#[derive(Debug, Clone)]
pub struct LoadedTraces {
    pub set: TraceSet,
    /// Number of traces that were cut down to the common length.
    pub truncated_traces: usize,
    /// Files that did not parse, with the reason.
    pub skipped_files: Vec<(String, String)>,
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>, TraceError> {
    let entries = fs::read_dir(dir).map_err(|e| TraceError::Io(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .map(|x| x.eq_ignore_ascii_case("csv"))
                    .unwrap_or(false)
        })
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Loads every `*.csv` file of `dir`, in lexicographic filename order.
pub fn load_trace_dir(dir: &Path, opts: &CsvOptions) -> Result<LoadedTraces, TraceError> {
    load_trace_dir_labeled(dir, opts, "unknown")
}

pub fn load_trace_dir_labeled(
    dir: &Path,
    opts: &CsvOptions,
    label: &str,
) -> Result<LoadedTraces, TraceError> {
    let files = csv_files(dir)?;
    let parsed: Vec<(String, Result<Trace, TraceError>)> = files
        .par_iter()
        .map(|path| {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let result = fs::read_to_string(path)
                .map_err(|e| TraceError::Io(e.to_string()))
                .and_then(|text| parse_csv_trace(&text, opts));
            (name, result)
        })
        .collect();

    let mut traces = Vec::new();
    let mut skipped_files = Vec::new();
    for (name, result) in parsed {
        match result {
            Ok(t) => traces.push(t),
            Err(e) => skipped_files.push((name, e.to_string())),
        }
    }
    if traces.len() < 2 {
        return Err(TraceError::TooFewTraces {
            found: traces.len(),
        });
    }

    let expected = traces[0].sample_rate_hz();
    for (index, t) in traces.iter().enumerate() {
        if (t.sample_rate_hz() - expected).abs() / expected > RATE_TOLERANCE {
            return Err(TraceError::InconsistentSampleRate {
                index,
                rate: t.sample_rate_hz(),
                expected,
            });
        }
    }

    let min_len = traces.iter().map(Trace::len).min().unwrap_or(0);
    let truncated_traces = traces.iter().filter(|t| t.len() > min_len).count();
    let traces = traces
        .into_iter()
        .map(|t| {
            // Rates within tolerance are unified to the first trace's rate.
            Trace {
                sample_rate_hz: expected,
                ..t.truncated(min_len)
            }
        })
        .collect();

    Ok(LoadedTraces {
        set: TraceSet::new(traces, label)?,
        truncated_traces,
        skipped_files,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_traces: usize,
    pub n_samples: usize,
    pub sample_rate_hz: f64,
    pub issues: Vec<String>,
}

/// Reports dimensions and data problems without modifying the set.
pub fn validate_traceset(ts: &TraceSet) -> ValidationReport {
    let mut issues = Vec::new();
    for (ti, trace) in ts.traces().iter().enumerate() {
        let mut finite = true;
        for (si, v) in trace.samples().iter().enumerate() {
            if !v.is_finite() {
                issues.push(format!("trace {ti}: non-finite value at sample {si}"));
                finite = false;
            }
        }
        if finite {
            let first = trace.samples()[0];
            if trace.samples().iter().all(|&v| v == first) {
                issues.push(format!("trace {ti}: constant trace"));
            }
        }
    }
    ValidationReport {
        n_traces: ts.n_traces(),
        n_samples: ts.n_samples(),
        sample_rate_hz: ts.sample_rate_hz(),
        issues,
    }
}
