//! Short-time Fourier analysis of trace ensembles and the stability map.
//!
//! The stability map scores each (time, frequency) cell by how consistent
//! its magnitude is across the ensemble: mean magnitude over cross-trace
//! standard deviation, max-normalized to [0, 1].

use std::fmt::Write as _;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_io::{Trace, TraceSet};

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("WindowTooLong: window length {window_len} exceeds trace length {trace_len}")]
    WindowTooLong { window_len: usize, trace_len: usize },
    #[error("InvalidParams: {0}")]
    InvalidParams(String),
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
    #[error("IndexOutOfRange: time bin {index} of {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFn {
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub window_len: usize,
    pub hop: usize,
    pub window_fn: WindowFn,
}

impl StftParams {
    /// Hann window with 50% overlap.
    pub fn half_overlap(window_len: usize) -> Self {
        StftParams {
            window_len,
            hop: (window_len / 2).max(1),
            window_fn: WindowFn::Hann,
        }
    }

    pub fn n_freq_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn n_time_bins(&self, n_samples: usize) -> usize {
        if n_samples < self.window_len {
            0
        } else {
            (n_samples - self.window_len) / self.hop + 1
        }
    }

    pub fn validate(&self, trace_len: usize) -> Result<(), SpectralError> {
        if self.window_len == 0 {
            return Err(SpectralError::InvalidParams("window_len must be >= 1".into()));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(SpectralError::InvalidParams(format!(
                "hop must be in 1..={}, got {}",
                self.window_len, self.hop
            )));
        }
        if self.window_len > trace_len {
            return Err(SpectralError::WindowTooLong {
                window_len: self.window_len,
                trace_len,
            });
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// `[n_time_bins x n_freq_bins]`.
    pub values: Matrix,
    pub freq_axis_hz: Vec<f64>,
    pub time_axis_s: Vec<f64>,
    pub params: StftParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityMap {
    pub scores: Matrix,
    pub freq_axis_hz: Vec<f64>,
    pub time_axis_s: Vec<f64>,
    pub params: StftParams,
}

impl StabilityMap {
    pub fn n_time_bins(&self) -> usize {
        self.scores.rows()
    }

    /// Frequency bin with the highest score in each time bin.
    pub fn argmax_per_time_bin(&self) -> Vec<usize> {
        (0..self.scores.rows())
            .map(|t| {
                let row = self.scores.row(t);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// 2-D feature points `(frequency_hz, stability_score)` of one time bin.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub points: Vec<[f64; 2]>,
    pub time_bin: usize,
    pub window_len: usize,
}

pub fn make_window(window_fn: WindowFn, n: usize) -> Vec<f64> {
    match window_fn {
        WindowFn::Rectangular => vec![1.0; n],
        WindowFn::Hann if n == 1 => vec![1.0],
        WindowFn::Hann => {
            let denom = (n - 1) as f64;
            (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos())
                .collect()
        }
    }
}

fn axes(params: &StftParams, n_samples: usize, fs: f64) -> (Vec<f64>, Vec<f64>) {
    let l = params.window_len as f64;
    let freq = (0..params.n_freq_bins()).map(|k| k as f64 * fs / l).collect();
    let time = (0..params.n_time_bins(n_samples))
        .map(|t| (t as f64 * params.hop as f64 + l / 2.0) / fs)
        .collect();
    (freq, time)
}

/// One-sided magnitude STFT without zero padding.
pub fn stft(trace: &Trace, params: &StftParams) -> Result<Spectrogram, SpectralError> {
    params.validate(trace.len())?;
    let window = make_window(params.window_fn, params.window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(params.window_len);
    Ok(stft_with(trace, params, &window, fft.as_ref()))
}

fn stft_with(
    trace: &Trace,
    params: &StftParams,
    window: &[f64],
    fft: &dyn rustfft::Fft<f64>,
) -> Spectrogram {
    let n_time = params.n_time_bins(trace.len());
    let n_freq = params.n_freq_bins();
    let mut values = Matrix::zeros(n_time, n_freq);
    let mut buf = vec![Complex::new(0.0, 0.0); params.window_len];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let samples = trace.samples();
    for t in 0..n_time {
        let seg = &samples[t * params.hop..t * params.hop + params.window_len];
        for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(window) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let row = &mut values.data[t * n_freq..(t + 1) * n_freq];
        for (v, b) in row.iter_mut().zip(&buf) {
            *v = b.norm();
        }
    }
    let (freq_axis_hz, time_axis_s) = axes(params, trace.len(), trace.sample_rate_hz());
    Spectrogram {
        values,
        freq_axis_hz,
        time_axis_s,
        params: *params,
    }
}

/// STFT of every trace in the set, in trace order.
pub fn stft_ensemble(ts: &TraceSet, params: &StftParams) -> Result<Vec<Spectrogram>, SpectralError> {
    params.validate(ts.n_samples())?;
    let window = make_window(params.window_fn, params.window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(params.window_len);
    Ok(ts
        .traces()
        .par_iter()
        .map(|t| stft_with(t, params, &window, fft.as_ref()))
        .collect())
}

fn check_ensemble(spectrograms: &[Spectrogram]) -> Result<(), SpectralError> {
    if spectrograms.len() < 2 {
        return Err(SpectralError::DimensionMismatch(format!(
            "ensemble needs at least 2 spectrograms, got {}",
            spectrograms.len()
        )));
    }
    let first = &spectrograms[0];
    for (i, s) in spectrograms.iter().enumerate().skip(1) {
        if !s.values.same_shape(&first.values) || s.params != first.params {
            return Err(SpectralError::DimensionMismatch(format!(
                "spectrogram {i} does not match spectrogram 0"
            )));
        }
    }
    Ok(())
}

/// Applies `f` to the sorted cross-ensemble values of each cell. Sorting makes
/// the reductions independent of ensemble order down to the last bit.
fn reduce_cells<F>(spectrograms: &[Spectrogram], f: F) -> Matrix
where
    F: Fn(usize, &[f64]) -> f64 + Sync,
{
    let shape = &spectrograms[0].values;
    let data = (0..shape.data.len())
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(spectrograms.len()),
            |cell, idx| {
                cell.clear();
                cell.extend(spectrograms.iter().map(|s| s.values.data[idx]));
                cell.sort_by(|a, b| a.total_cmp(b));
                f(idx, cell)
            },
        )
        .collect();
    Matrix {
        rows: shape.rows,
        cols: shape.cols,
        data,
    }
}

fn like(template: &Spectrogram, values: Matrix) -> Spectrogram {
    Spectrogram {
        values,
        freq_axis_hz: template.freq_axis_hz.clone(),
        time_axis_s: template.time_axis_s.clone(),
        params: template.params,
    }
}

pub fn ensemble_mean(spectrograms: &[Spectrogram]) -> Result<Spectrogram, SpectralError> {
    check_ensemble(spectrograms)?;
    let n = spectrograms.len() as f64;
    let values = reduce_cells(spectrograms, |_, cell| cell.iter().sum::<f64>() / n);
    Ok(like(&spectrograms[0], values))
}

/// Population variance (divides by N) of magnitudes around `mean`.
pub fn ensemble_variance(
    spectrograms: &[Spectrogram],
    mean: &Spectrogram,
) -> Result<Spectrogram, SpectralError> {
    check_ensemble(spectrograms)?;
    if !mean.values.same_shape(&spectrograms[0].values) {
        return Err(SpectralError::DimensionMismatch(
            "mean does not match ensemble".into(),
        ));
    }
    let n = spectrograms.len() as f64;
    let m = &mean.values.data;
    let values = reduce_cells(spectrograms, |idx, cell| {
        cell.iter().map(|v| (v - m[idx]) * (v - m[idx])).sum::<f64>() / n
    });
    Ok(like(&spectrograms[0], values))
}

/// Default stability floor relative to the peak mean magnitude.
pub const DEFAULT_EPS_REL: f64 = 1e-12;

/// Stability floor `eps_rel * max(mean)`.
pub fn relative_eps(mean: &Spectrogram, eps_rel: f64) -> f64 {
    eps_rel * mean.values.max().max(0.0)
}

pub fn default_eps(mean: &Spectrogram) -> f64 {
    relative_eps(mean, DEFAULT_EPS_REL)
}

pub fn stability_map(
    mean: &Spectrogram,
    variance: &Spectrogram,
    eps: f64,
) -> Result<StabilityMap, SpectralError> {
    if !mean.values.same_shape(&variance.values) {
        return Err(SpectralError::DimensionMismatch(
            "mean and variance shapes differ".into(),
        ));
    }
    // A zero floor only arises from an all-zero mean; keep 0/0 out.
    let eps = if eps > 0.0 { eps } else { f64::MIN_POSITIVE };
    let raw: Vec<f64> = mean
        .values
        .data
        .iter()
        .zip(&variance.values.data)
        .map(|(m, v)| m / (v.sqrt() + eps))
        .collect();
    let peak = raw.iter().copied().fold(0.0, f64::max);
    let data = if peak > 0.0 {
        raw.iter().map(|r| r / peak).collect()
    } else {
        vec![0.0; raw.len()]
    };
    Ok(StabilityMap {
        scores: Matrix {
            rows: mean.values.rows,
            cols: mean.values.cols,
            data,
        },
        freq_axis_hz: mean.freq_axis_hz.clone(),
        time_axis_s: mean.time_axis_s.clone(),
        params: mean.params,
    })
}

/// Mean, variance and stability map of a trace set for one STFT setting.
#[derive(Debug, Clone)]
pub struct EnsembleSpectra {
    pub mean: Spectrogram,
    pub variance: Spectrogram,
    pub stability: StabilityMap,
}

pub fn ensemble_spectra(
    ts: &TraceSet,
    params: &StftParams,
    eps_rel: f64,
) -> Result<EnsembleSpectra, SpectralError> {
    let specs = stft_ensemble(ts, params)?;
    let mean = ensemble_mean(&specs)?;
    let variance = ensemble_variance(&specs, &mean)?;
    let stability = stability_map(&mean, &variance, relative_eps(&mean, eps_rel))?;
    Ok(EnsembleSpectra {
        mean,
        variance,
        stability,
    })
}

pub fn extract_features(map: &StabilityMap, time_bin: usize) -> Result<FeatureSet, SpectralError> {
    if time_bin >= map.scores.rows() {
        return Err(SpectralError::IndexOutOfRange {
            index: time_bin,
            len: map.scores.rows(),
        });
    }
    let points = map
        .freq_axis_hz
        .iter()
        .zip(map.scores.row(time_bin))
        .map(|(&f, &s)| [f, s])
        .collect();
    Ok(FeatureSet {
        points,
        time_bin,
        window_len: map.params.window_len,
    })
}

/// CSV matrix: first row is the frequency axis, first column the time axis.
pub fn matrix_csv(values: &Matrix, freq_axis_hz: &[f64], time_axis_s: &[f64]) -> String {
    let mut out = String::from("time_s\\freq_hz");
    for f in freq_axis_hz {
        let _ = write!(out, ",{f:e}");
    }
    out.push('\n');
    for (t, time) in time_axis_s.iter().enumerate() {
        let _ = write!(out, "{time:e}");
        for v in values.row(t) {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    out
}

impl Spectrogram {
    pub fn to_csv(&self) -> String {
        matrix_csv(&self.values, &self.freq_axis_hz, &self.time_axis_s)
    }
}

impl StabilityMap {
    pub fn to_csv(&self) -> String {
        matrix_csv(&self.scores, &self.freq_axis_hz, &self.time_axis_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(samples: Vec<f64>, fs: f64) -> Trace {
        Trace::new(samples, fs).unwrap()
    }

    fn spec_with(values: Vec<Vec<f64>>) -> Spectrogram {
        let params = StftParams {
            window_len: 2 * (values[0].len() - 1),
            hop: 1,
            window_fn: WindowFn::Rectangular,
        };
        Spectrogram {
            freq_axis_hz: (0..values[0].len()).map(|k| k as f64).collect(),
            time_axis_s: (0..values.len()).map(|t| t as f64).collect(),
            values: Matrix::from_rows(&values),
            params,
        }
    }

    #[test]
    fn windows() {
        assert_eq!(make_window(WindowFn::Hann, 3), vec![0.0, 1.0, 0.0]);
        assert_eq!(make_window(WindowFn::Rectangular, 4), vec![1.0; 4]);
        // Direct summation of 0.5 - 0.5 cos(2 pi i / (n-1)) squared.
        let w = make_window(WindowFn::Hann, 200);
        let energy: f64 = w.iter().map(|x| x * x).sum();
        assert!((energy - 74.625).abs() < 1e-10, "{energy}");
    }

    #[test]
    fn zero_trace_gives_zero_magnitudes() {
        let s = stft(&trace(vec![0.0; 64], 1.0), &StftParams::half_overlap(16)).unwrap();
        assert!(s.values.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(s.values.rows(), 7);
        assert_eq!(s.values.cols(), 9);
    }

    #[test]
    fn window_too_long() {
        let err = stft(&trace(vec![0.0; 10], 1.0), &StftParams::half_overlap(11)).unwrap_err();
        assert_eq!(
            err,
            SpectralError::WindowTooLong {
                window_len: 11,
                trace_len: 10
            }
        );
    }

    #[test]
    fn axes_follow_closed_forms() {
        let s = stft(&trace(vec![0.0; 1000], 1e3), &StftParams::half_overlap(200)).unwrap();
        assert_eq!(s.freq_axis_hz.len(), 101);
        assert_eq!(s.freq_axis_hz[1], 5.0);
        assert_eq!(s.time_axis_s.len(), 9);
        assert_eq!(s.time_axis_s[0], 0.1);
        assert_eq!(s.time_axis_s[1], 0.2);
    }

    #[test]
    fn mean_and_variance_closed_forms() {
        let a = spec_with(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = spec_with(vec![vec![3.0, 2.0], vec![0.0, 8.0]]);
        let specs = [a.clone(), b];
        let m = ensemble_mean(&specs).unwrap();
        assert_eq!(m.values.as_slice(), &[2.0, 2.0, 1.5, 6.0]);
        let v = ensemble_variance(&specs, &m).unwrap();
        // (a - b)^2 / 4
        assert_eq!(v.values.as_slice(), &[1.0, 0.0, 2.25, 4.0]);

        let copies = vec![a.clone(); 5];
        let m = ensemble_mean(&copies).unwrap();
        assert_eq!(m.values, a.values);
        let v = ensemble_variance(&copies, &m).unwrap();
        assert!(v.values.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ensemble_shape_errors() {
        let a = spec_with(vec![vec![1.0, 2.0]]);
        let b = spec_with(vec![vec![1.0, 2.0, 3.0]]);
        assert!(matches!(
            ensemble_mean(&[a.clone(), b]),
            Err(SpectralError::DimensionMismatch(_))
        ));
        assert!(ensemble_mean(&[a]).is_err());
    }

    #[test]
    fn stability_with_zero_variance_is_normalized_mean() {
        let mean = spec_with(vec![vec![1.0, 4.0], vec![2.0, 0.0]]);
        let var = spec_with(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let map = stability_map(&mean, &var, 1e-3).unwrap();
        assert_eq!(map.scores.as_slice(), &[0.25, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn stability_of_zero_mean_is_zero() {
        let zero = spec_with(vec![vec![0.0, 0.0]]);
        let map = stability_map(&zero, &zero, default_eps(&zero)).unwrap();
        assert!(map.scores.as_slice().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn features_are_row_views() {
        let mean = spec_with(vec![vec![1.0, 4.0, 2.0], vec![2.0, 1.0, 3.0]]);
        let var = spec_with(vec![vec![1.0; 3], vec![4.0; 3]]);
        let map = stability_map(&mean, &var, 1e-9).unwrap();
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|t| {
                extract_features(&map, t)
                    .unwrap()
                    .points
                    .iter()
                    .map(|p| p[1])
                    .collect()
            })
            .collect();
        assert_eq!(Matrix::from_rows(&rows), map.scores);
        let fs = extract_features(&map, 0).unwrap();
        assert!(fs.points.windows(2).all(|w| w[0][0] < w[1][0]));
        assert_eq!(
            extract_features(&map, 2).unwrap_err(),
            SpectralError::IndexOutOfRange { index: 2, len: 2 }
        );
    }

    #[test]
    fn segment_length_200_has_101_features() {
        let ts = TraceSet::new(
            vec![trace(vec![1.0; 1000], 1e6), trace(vec![0.5; 1000], 1e6)],
            "x",
        )
        .unwrap();
        let spectra = ensemble_spectra(&ts, &StftParams::half_overlap(200), DEFAULT_EPS_REL).unwrap();
        assert_eq!(extract_features(&spectra.stability, 0).unwrap().points.len(), 101);
    }

    #[test]
    fn csv_matrix_layout() {
        let s = spec_with(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "time_s\\freq_hz,0e0,1e0");
        assert_eq!(lines[2], "1e0,3e0,4e0");
    }
}
