//! Cross-scale sweep and verdict.
//!
//! For every STFT window size the ensemble stability map is built, one
//! mixture is selected per time bin, and the selected component counts are
//! summarized by their (lower) median. An always-on Trojan shows up as a
//! low, flat median profile across window sizes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{select_order_stream, FitConfig, GmmError};
use crate::spectral::{ensemble_spectra, extract_features, SpectralError, StftParams, DEFAULT_EPS_REL};
use crate::trace_io::TraceSet;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("InvalidSweep: {0}")]
    InvalidSweep(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error("AllBinsSkipped: no time bin could be modeled at window {window_len}")]
    AllBinsSkipped { window_len: usize },
}

/// Overlap between consecutive STFT segments.
pub const OVERLAP_FRACTION: f64 = 0.5;

pub const DEFAULT_WINDOW_SIZES: [usize; 10] = [120, 160, 200, 240, 280, 320, 360, 400, 440, 480];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub window_sizes: Vec<usize>,
    pub overlap: f64,
    pub fit: FitConfig,
    /// Stability floor relative to the peak ensemble-mean magnitude.
    pub eps_rel: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            window_sizes: DEFAULT_WINDOW_SIZES.to_vec(),
            overlap: OVERLAP_FRACTION,
            fit: FitConfig::default(),
            eps_rel: DEFAULT_EPS_REL,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self, trace_len: usize) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidSweep(m));
        if self.window_sizes.is_empty() {
            return bad("window_sizes must be non-empty".into());
        }
        if self.window_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("window_sizes must be strictly increasing".into());
        }
        if self.window_sizes[0] < 2 {
            return bad("window sizes must be at least 2".into());
        }
        if let Some(&w) = self.window_sizes.iter().find(|&&w| w > trace_len) {
            return bad(format!("window size {w} exceeds trace length {trace_len}"));
        }
        if self.overlap != OVERLAP_FRACTION {
            return bad(format!("overlap is fixed at {OVERLAP_FRACTION}"));
        }
        if !(self.eps_rel > 0.0) {
            return bad("eps_rel must be > 0".into());
        }
        self.fit.validate()?;
        Ok(())
    }
}

/// Selected component count of one time bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinOutcome {
    pub time_bin: usize,
    /// `None` when no component count could be fitted.
    pub k: Option<usize>,
    pub bic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowProfile {
    pub window_len: usize,
    pub hop: usize,
    pub n_time_bins: usize,
    pub median_k: f64,
    /// Selected `k` of every modeled time bin, in time order.
    pub k_distribution: Vec<usize>,
    pub skipped_bins: usize,
    pub bins: Vec<BinOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleProfile {
    pub label: String,
    pub config: SweepConfig,
    pub windows: Vec<WindowProfile>,
}

impl ScaleProfile {
    pub fn medians(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.median_k).collect()
    }

    pub fn window_sizes(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.window_len).collect()
    }
}

/// Middle value of the sorted data; for an even count, the lower of the two
/// middle values.
pub fn lower_median<T: Copy + PartialOrd>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Some(sorted[(sorted.len() - 1) / 2])
}

/// Grid the stability scores are snapped to before fitting. Scaling the
/// traces by a constant moves the scores by a few ulp, and EM started from
/// nearly equal points can still settle in different optima; on a dyadic
/// grid this coarse the snapped scores almost always come out bit-identical.
const SCORE_GRID: f64 = 1.0 / (1u64 << 24) as f64;

fn snap_score(s: f64) -> f64 {
    (s / SCORE_GRID).round() * SCORE_GRID
}

/// Stream id for the fits of one time bin at one window size.
fn bin_stream(window_len: usize, time_bin: usize) -> u64 {
    ((window_len as u64) << 32) | time_bin as u64
}

pub fn analyze_window_size(
    ts: &TraceSet,
    window_len: usize,
    cfg: &SweepConfig,
) -> Result<WindowProfile, DetectorError> {
    let params = StftParams::half_overlap(window_len);
    params.validate(ts.n_samples())?;
    let spectra = ensemble_spectra(ts, &params, cfg.eps_rel)?;
    let map = &spectra.stability;
    let n_time_bins = map.n_time_bins();

    let bins: Vec<BinOutcome> = (0..n_time_bins)
        .into_par_iter()
        .map(|t| -> Result<BinOutcome, DetectorError> {
            let mut features = extract_features(map, t)?;
            for p in &mut features.points {
                p[1] = snap_score(p[1]);
            }
            match select_order_stream(&features.points, &cfg.fit, bin_stream(window_len, t)) {
                Ok(sel) => Ok(BinOutcome {
                    time_bin: t,
                    k: Some(sel.best.k),
                    bic: Some(sel.best.bic),
                }),
                Err(GmmError::NoFeasibleK { .. }) | Err(GmmError::TooFewPoints { .. }) => {
                    Ok(BinOutcome {
                        time_bin: t,
                        k: None,
                        bic: None,
                    })
                }
                Err(e) => Err(e.into()),
            }
        })
        .collect::<Result<_, _>>()?;

    let k_distribution: Vec<usize> = bins.iter().filter_map(|b| b.k).collect();
    let median = lower_median(&k_distribution).ok_or(DetectorError::AllBinsSkipped { window_len })?;
    Ok(WindowProfile {
        window_len,
        hop: params.hop,
        n_time_bins,
        median_k: median as f64,
        skipped_bins: n_time_bins - k_distribution.len(),
        k_distribution,
        bins,
    })
}

pub fn scale_sweep(ts: &TraceSet, cfg: &SweepConfig) -> Result<ScaleProfile, DetectorError> {
    cfg.validate(ts.n_samples())?;
    let windows = cfg
        .window_sizes
        .iter()
        .map(|&w| analyze_window_size(ts, w, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScaleProfile {
        label: ts.label().to_string(),
        config: cfg.clone(),
        windows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub range_max_ht: f64,
    pub median_max_ht: f64,
    pub range_min_free: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            range_max_ht: 1.0,
            median_max_ht: 4.0,
            range_min_free: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    HtSuspected,
    HtFreeConsistent,
    Indeterminate,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::HtSuspected => "ht_suspected",
            Decision::HtFreeConsistent => "ht_free_consistent",
            Decision::Indeterminate => "indeterminate",
        }
    }
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    /// max - min of the per-window medians.
    pub range_stat: f64,
    pub iqr_stat: f64,
    pub median_of_medians: f64,
    /// Least-squares slope of median k against window length (per sample).
    pub slope_stat: f64,
    /// Number of window-size steps where the median increases.
    pub trend_violations: usize,
    pub thresholds: Thresholds,
}

/// Q3 - Q1, each quartile the lower median of its half. For odd counts the
/// middle value belongs to neither half.
pub fn interquartile_range(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let half = sorted.len() / 2;
    let q1 = lower_median(&sorted[..half]).unwrap_or(0.0);
    let q3 = lower_median(&sorted[sorted.len() - half..]).unwrap_or(0.0);
    q3 - q1
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

pub fn trend_violations(medians: &[f64]) -> usize {
    medians.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Minimum number of window sizes for a non-indeterminate verdict.
pub const MIN_WINDOWS_FOR_VERDICT: usize = 3;

pub fn decide(profile: &ScaleProfile, thresholds: &Thresholds) -> Verdict {
    let medians = profile.medians();
    let sizes: Vec<f64> = profile.window_sizes().iter().map(|&w| w as f64).collect();
    let max = medians.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = medians.iter().copied().fold(f64::INFINITY, f64::min);
    let range_stat = if medians.is_empty() { 0.0 } else { max - min };
    let median_of_medians = lower_median(&medians).unwrap_or(0.0);

    let decision = if medians.len() < MIN_WINDOWS_FOR_VERDICT {
        Decision::Indeterminate
    } else if range_stat <= thresholds.range_max_ht && median_of_medians <= thresholds.median_max_ht {
        Decision::HtSuspected
    } else if range_stat >= thresholds.range_min_free {
        Decision::HtFreeConsistent
    } else {
        Decision::Indeterminate
    };

    Verdict {
        decision,
        range_stat,
        iqr_stat: interquartile_range(&medians),
        median_of_medians,
        slope_stat: slope(&sizes, &medians),
        trend_violations: trend_violations(&medians),
        thresholds: *thresholds,
    }
}
