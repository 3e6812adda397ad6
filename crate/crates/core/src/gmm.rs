//! Two-dimensional Gaussian mixtures fitted by EM, with BIC order selection.
//!
//! Feature sets are standardized per dimension before fitting; all
//! likelihoods and BIC scores refer to the standardized data so that scores
//! for different component counts are comparable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, Prng};
use crate::synth::seed_string;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// A component whose responsibility mass falls below this fraction of the
/// point count has collapsed.
const COLLAPSE_FRACTION: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum GmmError {
    #[error("TooFewPoints: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("KTooLarge: {k} components but only {distinct} distinct points")]
    KTooLarge { k: usize, distinct: usize },
    #[error("DegenerateFit: every restart collapsed for k = {k}")]
    DegenerateFit { k: usize },
    #[error("NoFeasibleK: no component count in {k_min}..={k_max} could be fitted")]
    NoFeasibleK { k_min: usize, k_max: usize },
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceType {
    Full,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub n_restarts: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub cov_floor: f64,
    #[serde(with = "seed_string")]
    pub seed: u64,
    pub covariance: CovarianceType,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k_min: 1,
            k_max: 12,
            n_restarts: 5,
            max_iters: 300,
            rel_tol: 1e-6,
            cov_floor: 1e-6,
            seed: 1,
            covariance: CovarianceType::Full,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), GmmError> {
        let bad = |m: &str| Err(GmmError::InvalidConfig(m.to_string()));
        if self.k_min == 0 || self.k_min > self.k_max {
            return bad("require 1 <= k_min <= k_max");
        }
        if self.n_restarts == 0 || self.max_iters == 0 {
            return bad("n_restarts and max_iters must be positive");
        }
        if !(self.rel_tol > 0.0) {
            return bad("rel_tol must be > 0");
        }
        if !(self.cov_floor > 0.0) {
            return bad("cov_floor must be > 0");
        }
        Ok(())
    }
}

/// Symmetric 2x2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Sym2 {
    xx: f64,
    xy: f64,
    yy: f64,
}

impl Sym2 {
    fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    fn min_eigenvalue(&self) -> f64 {
        let half_trace = 0.5 * (self.xx + self.yy);
        let half_diff = 0.5 * (self.xx - self.yy);
        half_trace - (half_diff * half_diff + self.xy * self.xy).sqrt()
    }

    /// Adds `floor` to the diagonal until both eigenvalues reach it.
    /// Returns whether the floor was applied.
    fn apply_floor(&mut self, floor: f64) -> bool {
        let mut hit = false;
        while self.min_eigenvalue() < floor {
            self.xx += floor;
            self.yy += floor;
            hit = true;
        }
        hit
    }

    fn to_array(self) -> [[f64; 2]; 2] {
        [[self.xx, self.xy], [self.xy, self.yy]]
    }

    fn from_array(a: &[[f64; 2]; 2]) -> Self {
        Sym2 {
            xx: a[0][0],
            xy: a[0][1],
            yy: a[1][1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmmModel {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub covariances: Vec<[[f64; 2]; 2]>,
    pub log_likelihood: f64,
    pub bic: f64,
    pub n_points: usize,
    pub converged: bool,
    pub iters_used: usize,
    pub covariance: CovarianceType,
}

/// Free parameters of a `k`-component mixture in two dimensions.
pub fn n_params(k: usize, covariance: CovarianceType) -> usize {
    const D: usize = 2;
    let cov = match covariance {
        CovarianceType::Full => D * (D + 1) / 2,
        CovarianceType::Diagonal => D,
    };
    (k - 1) + k * D + k * cov
}

/// `p ln n - 2 LL`; lower is better.
pub fn bic(model: &GmmModel) -> f64 {
    bic_value(
        n_params(model.k, model.covariance),
        model.n_points,
        model.log_likelihood,
    )
}

fn bic_value(p: usize, n: usize, log_likelihood: f64) -> f64 {
    p as f64 * (n as f64).ln() - 2.0 * log_likelihood
}

/// Per-component constants for evaluating log densities, stored by field so
/// the per-point loops over components vectorize.
struct Components {
    mx: Vec<f64>,
    my: Vec<f64>,
    // Inverse covariance.
    ixx: Vec<f64>,
    ixy: Vec<f64>,
    iyy: Vec<f64>,
    // ln w - ln 2pi - ln det / 2
    log_norm: Vec<f64>,
}

impl Components {
    fn new(params: &Params) -> Self {
        let k = params.weights.len();
        let mut c = Components {
            mx: Vec::with_capacity(k),
            my: Vec::with_capacity(k),
            ixx: Vec::with_capacity(k),
            ixy: Vec::with_capacity(k),
            iyy: Vec::with_capacity(k),
            log_norm: Vec::with_capacity(k),
        };
        for j in 0..k {
            let cov = &params.covs[j];
            let det = cov.det();
            c.mx.push(params.means[j][0]);
            c.my.push(params.means[j][1]);
            c.ixx.push(cov.yy / det);
            c.ixy.push(-cov.xy / det);
            c.iyy.push(cov.xx / det);
            c.log_norm.push(params.weights[j].ln() - LN_2PI - 0.5 * det.ln());
        }
        c
    }

    fn len(&self) -> usize {
        self.mx.len()
    }
}

struct Params {
    weights: Vec<f64>,
    means: Vec<[f64; 2]>,
    covs: Vec<Sym2>,
}

/// `exp(x)` for `x <= 0`, branch-free so loops over it vectorize. Uses only
/// separately rounded multiplies and adds, so every instruction set gives
/// the same bits. Within a few ulp of `f64::exp`; exactly 1 at 0 and 0
/// below -708.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const ROUND: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const COEFFS: [f64; 13] = [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ];
    let xc = if x > -708.0 { x } else { -708.0 };
    let t = xc * std::f64::consts::LOG2_E + ROUND;
    let n = t - ROUND;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    // Taylor series to degree 13; the tail is below 2e-16 for |r| <= ln2/2.
    let mut p = 1.0 / 6_227_020_800.0;
    for c in COEFFS {
        p = p * r + c;
    }
    let shift = t.to_bits().wrapping_sub(ROUND.to_bits());
    let scale = f64::from_bits(shift.wrapping_add(1023) << 52);
    if x > -708.0 {
        p * scale
    } else {
        0.0
    }
}

/// Replaces each log density in `row` by its exponential relative to the
/// point's maximum and adds it to the point's sum.
#[inline(always)]
fn relative_exp(row: &mut [f64], max: &[f64], sum: &mut [f64]) {
    let b = row.len();
    let (max, sum) = (&max[..b], &mut sum[..b]);
    for i in 0..b {
        row[i] = exp_nonpositive(row[i] - max[i]);
        sum[i] += row[i];
    }
}

/// Points handled together, so the per-component loops run over a block of
/// points and vectorize.
const BLOCK: usize = 128;

/// Partial sums kept per moment while accumulating over a block.
const LANES: usize = 8;

/// Scratch space for one block of points.
struct Block {
    len: usize,
    px: [f64; BLOCK],
    py: [f64; BLOCK],
    max: [f64; BLOCK],
    sum: [f64; BLOCK],
    // Component-major, `BLOCK` entries per component: weights relative to
    // each point's largest one, which is exactly 1.
    rel: Vec<f64>,
}

impl Block {
    fn new(k: usize) -> Self {
        Block {
            len: 0,
            px: [0.0; BLOCK],
            py: [0.0; BLOCK],
            max: [0.0; BLOCK],
            sum: [0.0; BLOCK],
            rel: vec![0.0; k * BLOCK],
        }
    }

    #[inline(always)]
    /// Loads `pts` (at most `BLOCK`) and computes each point's maximum log
    /// density, relative weights and their sum. Responsibilities are
    /// `rel / sum`.
    fn fill(&mut self, pts: &[[f64; 2]], c: &Components) {
        let b = pts.len();
        self.len = b;
        for (i, p) in pts.iter().enumerate() {
            self.px[i] = p[0];
            self.py[i] = p[1];
        }
        let (px, py) = (&self.px[..b], &self.py[..b]);
        for (j, row) in self.rel.chunks_exact_mut(BLOCK).enumerate() {
            let (mx, my, ixx, ixy, iyy, ln) = (c.mx[j], c.my[j], c.ixx[j], c.ixy[j], c.iyy[j], c.log_norm[j]);
            let row = &mut row[..b];
            for i in 0..b {
                let dx = px[i] - mx;
                let dy = py[i] - my;
                row[i] = ln - 0.5 * (dx * (ixx * dx + ixy * dy) + dy * (ixy * dx + iyy * dy));
            }
        }
        let max = &mut self.max[..b];
        max.fill(f64::NEG_INFINITY);
        for row in self.rel.chunks_exact(BLOCK) {
            for (m, &r) in max.iter_mut().zip(&row[..b]) {
                *m = if r > *m { r } else { *m };
            }
        }
        let sum = &mut self.sum[..b];
        sum.fill(0.0);
        for row in self.rel.chunks_exact_mut(BLOCK) {
            relative_exp(&mut row[..b], max, sum);
        }
    }
}

/// Log-likelihood accumulated block by block from each point's maximum log
/// density and sum of relative weights, in interleaved partial sums.
struct LogLik {
    max: [f64; LANES],
    log_sum: [f64; LANES],
}

impl LogLik {
    fn new() -> Self {
        LogLik {
            max: [0.0; LANES],
            log_sum: [0.0; LANES],
        }
    }

    /// Each lane multiplies `BLOCK / LANES` sums, each in `[1, k]`, before
    /// taking one logarithm; that product cannot overflow for any usable k.
    #[inline(always)]
    fn add_block(&mut self, block: &Block) {
        let b = block.len;
        let (max, sum) = (&block.max[..b], &block.sum[..b]);
        let mut prod = [1.0f64; LANES];
        let full = b - b % LANES;
        for base in (0..full).step_by(LANES) {
            for l in 0..LANES {
                prod[l] *= sum[base + l];
                self.max[l] += max[base + l];
            }
        }
        for i in full..b {
            prod[i - full] *= sum[i];
            self.max[i - full] += max[i];
        }
        for (acc, p) in self.log_sum.iter_mut().zip(prod) {
            *acc += p.ln();
        }
    }

    fn total(&self) -> f64 {
        self.max.iter().sum::<f64>() + self.log_sum.iter().sum::<f64>()
    }
}

/// Fills `resp` (row-major `n x k`) with responsibilities and returns the
/// total log-likelihood.
fn e_step(points: &[[f64; 2]], params: &Params, resp: &mut [f64]) -> f64 {
    let comps = Components::new(params);
    let k = comps.len();
    let mut block = Block::new(k);
    let mut ll = LogLik::new();
    for (pts, out) in points.chunks(BLOCK).zip(resp.chunks_mut(BLOCK * k)) {
        block.fill(pts, &comps);
        for i in 0..block.len {
            let inv = 1.0 / block.sum[i];
            for j in 0..k {
                out[i * k + j] = block.rel[j * BLOCK + i] * inv;
            }
        }
        ll.add_block(&block);
    }
    ll.total()
}

/// Responsibility-weighted moments of every component, taken about the
/// component's current mean.
#[derive(Clone, Default)]
struct Moments {
    mass: Vec<f64>,
    sx: Vec<f64>,
    sy: Vec<f64>,
    sxx: Vec<f64>,
    sxy: Vec<f64>,
    syy: Vec<f64>,
}

impl Moments {
    fn reset(&mut self, k: usize) {
        for v in [
            &mut self.mass,
            &mut self.sx,
            &mut self.sy,
            &mut self.sxx,
            &mut self.sxy,
            &mut self.syy,
        ] {
            v.clear();
            v.resize(k, 0.0);
        }
    }
}

/// E-step that also accumulates the moments the next M-step needs, in the
/// same pass. Returns the log-likelihood at `params`.
fn e_step_moments(points: &[[f64; 2]], params: &Params, m: &mut Moments) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        // The kernel is compiled again for wider vector units. No fused
        // multiply-add is ever emitted, so each variant gives the same bits.
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports AVX-512F, checked just above.
            return unsafe { e_step_moments_avx512(points, params, m) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { e_step_moments_avx2(points, params, m) };
        }
    }
    e_step_moments_kernel(points, params, m)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn e_step_moments_avx512(points: &[[f64; 2]], params: &Params, m: &mut Moments) -> f64 {
    e_step_moments_kernel(points, params, m)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn e_step_moments_avx2(points: &[[f64; 2]], params: &Params, m: &mut Moments) -> f64 {
    e_step_moments_kernel(points, params, m)
}

#[inline(always)]
fn e_step_moments_kernel(points: &[[f64; 2]], params: &Params, m: &mut Moments) -> f64 {
    let c = Components::new(params);
    let k = c.len();
    let mut block = Block::new(k);
    let mut inv = [0.0; BLOCK];
    let mut ll = LogLik::new();
    // Partial sums per (component, moment, point slot within a block):
    // slot i collects points i, i + BLOCK, ... so the per-block updates are
    // elementwise and vectorize. Slots are summed in order at the end.
    let mut acc = vec![0.0; k * 6 * BLOCK];
    for pts in points.chunks(BLOCK) {
        block.fill(pts, &c);
        ll.add_block(&block);
        let b = block.len;
        for i in 0..b {
            inv[i] = 1.0 / block.sum[i];
        }
        let (px, py, inv) = (&block.px[..b], &block.py[..b], &inv[..b]);
        for ((row, acc), (&mx, &my)) in block
            .rel
            .chunks_exact(BLOCK)
            .zip(acc.chunks_exact_mut(6 * BLOCK))
            .zip(c.mx.iter().zip(&c.my))
        {
            let row = &row[..b];
            let (mass, rest) = acc.split_at_mut(BLOCK);
            let (sx, rest) = rest.split_at_mut(BLOCK);
            let (sy, rest) = rest.split_at_mut(BLOCK);
            let (sxx, rest) = rest.split_at_mut(BLOCK);
            let (sxy, syy) = rest.split_at_mut(BLOCK);
            let (mass, sx, sy) = (&mut mass[..b], &mut sx[..b], &mut sy[..b]);
            let (sxx, sxy, syy) = (&mut sxx[..b], &mut sxy[..b], &mut syy[..b]);
            for i in 0..b {
                let r = row[i] * inv[i];
                let dx = px[i] - mx;
                let dy = py[i] - my;
                let rx = r * dx;
                let ry = r * dy;
                mass[i] += r;
                sx[i] += rx;
                sy[i] += ry;
                sxx[i] += rx * dx;
                sxy[i] += rx * dy;
                syy[i] += ry * dy;
            }
        }
    }
    m.reset(k);
    for (j, acc) in acc.chunks_exact(6 * BLOCK).enumerate() {
        let mut sums = acc.chunks_exact(BLOCK).map(|slots| slots.iter().sum::<f64>());
        m.mass[j] = sums.next().unwrap();
        m.sx[j] = sums.next().unwrap();
        m.sy[j] = sums.next().unwrap();
        m.sxx[j] = sums.next().unwrap();
        m.sxy[j] = sums.next().unwrap();
        m.syy[j] = sums.next().unwrap();
    }
    ll.total()
}

/// Closed-form M-step from moments about the previous means. Returns `None`
/// when a component collapses, else the new parameters and whether any
/// covariance needed flooring.
fn m_step(
    n: usize,
    m: &Moments,
    prev_means: &[[f64; 2]],
    cfg: &FitConfig,
) -> Option<(Params, bool)> {
    if m.mass.iter().any(|&w| w < COLLAPSE_FRACTION * n as f64) {
        return None;
    }
    let mut floored = false;
    let mut means = Vec::with_capacity(m.mass.len());
    let mut covs = Vec::with_capacity(m.mass.len());
    for (j, prev) in prev_means.iter().enumerate() {
        let w = m.mass[j];
        let (ox, oy) = (m.sx[j] / w, m.sy[j] / w);
        means.push([prev[0] + ox, prev[1] + oy]);
        let mut c = Sym2 {
            xx: m.sxx[j] / w - ox * ox,
            xy: m.sxy[j] / w - ox * oy,
            yy: m.syy[j] / w - oy * oy,
        };
        if cfg.covariance == CovarianceType::Diagonal {
            c.xy = 0.0;
        }
        floored |= c.apply_floor(cfg.cov_floor);
        covs.push(c);
    }
    let total: f64 = m.mass.iter().sum();
    let weights = m.mass.iter().map(|w| w / total).collect();
    Some((
        Params {
            weights,
            means,
            covs,
        },
        floored,
    ))
}

/// Per-dimension affine transform applied before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Standardization {
    pub mean: [f64; 2],
    pub scale: [f64; 2],
}

impl Standardization {
    pub fn apply(&self, p: &[f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.mean[0]) / self.scale[0],
            (p[1] - self.mean[1]) / self.scale[1],
        ]
    }

    /// Re-expresses a model fitted on standardized data in original units.
    /// Likelihood and BIC keep their standardized-data values.
    pub fn to_original(&self, model: &GmmModel) -> GmmModel {
        let [sx, sy] = self.scale;
        GmmModel {
            means: model
                .means
                .iter()
                .map(|m| [m[0] * sx + self.mean[0], m[1] * sy + self.mean[1]])
                .collect(),
            covariances: model
                .covariances
                .iter()
                .map(|c| {
                    [
                        [c[0][0] * sx * sx, c[0][1] * sx * sy],
                        [c[1][0] * sx * sy, c[1][1] * sy * sy],
                    ]
                })
                .collect(),
            ..model.clone()
        }
    }
}

/// Shifts each dimension to zero mean and scales it to unit population
/// standard deviation; a constant dimension keeps scale 1.
pub fn standardize(points: &[[f64; 2]]) -> Result<(Vec<[f64; 2]>, Standardization), GmmError> {
    if points.len() < 2 {
        return Err(GmmError::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let mut mean = [0.0; 2];
    let mut scale = [1.0; 2];
    for d in 0..2 {
        mean[d] = points.iter().map(|p| p[d]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd > 0.0 && sd.is_finite() {
            scale[d] = sd;
        }
    }
    let t = Standardization { mean, scale };
    Ok((points.iter().map(|p| t.apply(p)).collect(), t))
}

fn count_distinct(points: &[[f64; 2]]) -> usize {
    let mut sorted: Vec<[f64; 2]> = points.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    sorted.dedup();
    sorted.len()
}

fn sq_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// k-means++ seeding: uniform first center, then D²-weighted draws.
pub fn kmeanspp_init(points: &[[f64; 2]], k: usize, rng: &mut Prng) -> Result<Vec<[f64; 2]>, GmmError> {
    let distinct = count_distinct(points);
    if k == 0 || k > distinct {
        return Err(GmmError::KTooLarge { k, distinct });
    }
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.index(points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.uniform01() * total;
        let mut acc = 0.0;
        // Fall back to the last point with positive weight if rounding
        // leaves the target past the end.
        let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if d > 0.0 && acc > target {
                chosen = i;
                break;
            }
        }
        let c = points[chosen];
        centers.push(c);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
    }
    Ok(centers)
}

/// Log-likelihood trajectory of one EM restart.
#[derive(Debug, Clone, Default)]
pub struct RestartTrace {
    /// Log-likelihood at the initial parameters, then after every M-step.
    pub log_likelihoods: Vec<f64>,
    /// `floor_hits[i]` is set when the M-step producing
    /// `log_likelihoods[i + 1]` had to floor a covariance.
    pub floor_hits: Vec<bool>,
    pub collapsed: bool,
}

fn sample_covariance(points: &[[f64; 2]]) -> Sym2 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut c = Sym2 {
        xx: 0.0,
        xy: 0.0,
        yy: 0.0,
    };
    for p in points {
        c.xx += (p[0] - mx) * (p[0] - mx);
        c.xy += (p[0] - mx) * (p[1] - my);
        c.yy += (p[1] - my) * (p[1] - my);
    }
    c.xx /= n;
    c.xy /= n;
    c.yy /= n;
    c
}

struct RestartOutcome {
    params: Params,
    log_likelihood: f64,
    converged: bool,
    iters_used: usize,
}

fn run_restart(
    points: &[[f64; 2]],
    k: usize,
    cfg: &FitConfig,
    rng: &mut Prng,
    trace: &mut RestartTrace,
) -> Result<Option<RestartOutcome>, GmmError> {
    let means = kmeanspp_init(points, k, rng)?;
    let mut shared = sample_covariance(points);
    if cfg.covariance == CovarianceType::Diagonal {
        shared.xy = 0.0;
    }
    shared.apply_floor(cfg.cov_floor);
    let mut params = Params {
        weights: vec![1.0 / k as f64; k],
        means,
        covs: vec![shared; k],
    };
    let mut moments = Moments::default();
    let mut ll = e_step_moments(points, &params, &mut moments);
    trace.log_likelihoods.push(ll);
    let mut converged = false;
    let mut iters_used = 0;
    for iter in 1..=cfg.max_iters {
        let Some((next, floored)) = m_step(points.len(), &moments, &params.means, cfg) else {
            trace.collapsed = true;
            return Ok(None);
        };
        params = next;
        let new_ll = e_step_moments(points, &params, &mut moments);
        trace.log_likelihoods.push(new_ll);
        trace.floor_hits.push(floored);
        iters_used = iter;
        let change = (new_ll - ll).abs();
        ll = new_ll;
        if change <= cfg.rel_tol * ll.abs() {
            converged = true;
            break;
        }
    }
    Ok(Some(RestartOutcome {
        params,
        log_likelihood: ll,
        converged,
        iters_used,
    }))
}

/// Fits a `k`-component mixture to standardized points, keeping the best of
/// `cfg.n_restarts` restarts by final log-likelihood.
pub fn em_fit(points: &[[f64; 2]], k: usize, cfg: &FitConfig, rng: &mut Prng) -> Result<GmmModel, GmmError> {
    em_fit_traced(points, k, cfg, rng).map(|(m, _)| m)
}

/// [`em_fit`] that also returns the log-likelihood trajectory of every restart.
pub fn em_fit_traced(
    points: &[[f64; 2]],
    k: usize,
    cfg: &FitConfig,
    rng: &mut Prng,
) -> Result<(GmmModel, Vec<RestartTrace>), GmmError> {
    cfg.validate()?;
    if points.len() < k {
        return Err(GmmError::TooFewPoints {
            needed: k,
            got: points.len(),
        });
    }
    let base = rng.next_u64();
    let mut traces = Vec::with_capacity(cfg.n_restarts);
    let mut best: Option<RestartOutcome> = None;
    for restart in 0..cfg.n_restarts {
        let mut restart_rng = Prng::new(derive_seed(&[base, restart as u64]));
        let mut trace = RestartTrace::default();
        let outcome = run_restart(points, k, cfg, &mut restart_rng, &mut trace)?;
        traces.push(trace);
        if let Some(o) = outcome {
            if best.as_ref().is_none_or(|b| o.log_likelihood > b.log_likelihood) {
                best = Some(o);
            }
        }
    }
    let best = best.ok_or(GmmError::DegenerateFit { k })?;
    let mut model = GmmModel {
        k,
        weights: best.params.weights,
        means: best.params.means,
        covariances: best.params.covs.iter().map(|c| c.to_array()).collect(),
        log_likelihood: best.log_likelihood,
        bic: 0.0,
        n_points: points.len(),
        converged: best.converged,
        iters_used: best.iters_used,
        covariance: cfg.covariance,
    };
    model.bic = bic(&model);
    Ok((model, traces))
}

impl GmmModel {
    fn params(&self) -> Params {
        Params {
            weights: self.weights.clone(),
            means: self.means.clone(),
            covs: self.covariances.iter().map(Sym2::from_array).collect(),
        }
    }

    /// Posterior component probabilities, one row per point.
    pub fn responsibilities(&self, points: &[[f64; 2]]) -> Vec<Vec<f64>> {
        let mut resp = vec![0.0; points.len() * self.k];
        e_step(points, &self.params(), &mut resp);
        resp.chunks_exact(self.k).map(<[f64]>::to_vec).collect()
    }

    pub fn log_likelihood_of(&self, points: &[[f64; 2]]) -> f64 {
        let mut resp = vec![0.0; points.len() * self.k];
        e_step(points, &self.params(), &mut resp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderStatus {
    Fitted,
    Skipped,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderRow {
    pub k: usize,
    pub status: OrderStatus,
    pub bic: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Winning model, in standardized units.
    pub best: GmmModel,
    pub table: Vec<OrderRow>,
    pub transform: Standardization,
}

impl Selection {
    pub fn best_original_units(&self) -> GmmModel {
        self.transform.to_original(&self.best)
    }
}

/// Fits every `k` in `k_min..=k_max` and keeps the lowest BIC, breaking ties
/// toward fewer components.
pub fn select_order(points: &[[f64; 2]], cfg: &FitConfig) -> Result<Selection, GmmError> {
    select_order_stream(points, cfg, 0)
}

/// [`select_order`] with an extra stream id mixed into every fit's seed, so
/// different feature sets draw independent restarts.
pub fn select_order_stream(points: &[[f64; 2]], cfg: &FitConfig, stream: u64) -> Result<Selection, GmmError> {
    cfg.validate()?;
    let (std_points, transform) = standardize(points)?;
    // Each order has its own seed, so the fits are independent and their
    // results do not depend on scheduling.
    let fits: Vec<Option<Result<GmmModel, GmmError>>> = (cfg.k_min..=cfg.k_max)
        .into_par_iter()
        .map(|k| {
            if std_points.len() < k {
                return None;
            }
            let mut rng = Prng::new(derive_seed(&[cfg.seed, stream, k as u64]));
            Some(em_fit(&std_points, k, cfg, &mut rng))
        })
        .collect();
    let mut table = Vec::new();
    let mut best: Option<GmmModel> = None;
    for (k, fit) in (cfg.k_min..=cfg.k_max).zip(fits) {
        match fit {
            Some(Ok(model)) => {
                table.push(OrderRow {
                    k,
                    status: OrderStatus::Fitted,
                    bic: Some(model.bic),
                    converged: model.converged,
                });
                if best.as_ref().is_none_or(|b| model.bic < b.bic) {
                    best = Some(model);
                }
            }
            None | Some(Err(GmmError::KTooLarge { .. })) => table.push(OrderRow {
                k,
                status: OrderStatus::Skipped,
                bic: None,
                converged: false,
            }),
            Some(Err(GmmError::DegenerateFit { .. })) => table.push(OrderRow {
                k,
                status: OrderStatus::Degenerate,
                bic: None,
                converged: false,
            }),
            Some(Err(e)) => return Err(e),
        }
    }
    let best = best.ok_or(GmmError::NoFeasibleK {
        k_min: cfg.k_min,
        k_max: cfg.k_max,
    })?;
    Ok(Selection {
        best,
        table,
        transform,
    })
}
