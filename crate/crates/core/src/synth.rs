//! Deterministic synthetic EM trace ensembles.
//!
//! Each trace is an additive mix of a clock tone, a per-trace schedule of
//! operational modes (each mode a set of carriers held for a dwell time),
//! white Gaussian noise, and optionally an always-on CDMA leakage Trojan.
//! The Trojan term is computed once per ensemble: key and plaintext are fixed
//! across captures, so the spreading code is identical in every trace.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Prng, ZERO_SEED_REMAP};
use crate::trace_io::{Trace, TraceError, TraceSet};

pub const LABEL_HT_FREE: &str = "ht_free";
pub const LABEL_HT_INSERTED: &str = "ht_inserted";

/// Number of key bits cycled through by the leakage modulator.
pub const KEY_BITS: usize = 128;

/// Load size, in flip-flops, at which `amp` is taken at face value.
const REFERENCE_LOAD_FFS: u32 = 8;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Serde adapter writing `u64` seeds as decimal strings, so they survive
/// JSON readers that parse numbers as doubles.
pub mod seed_string {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Str(String),
            Num(u64),
        }
        match Repr::deserialize(d)? {
            Repr::Str(s) => s.trim().parse().map_err(de::Error::custom),
            Repr::Num(n) => Ok(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    /// `(freq_hz, amp)` pairs emitted while the mode is active.
    pub carriers: Vec<(f64, f64)>,
    pub dwell_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HtConfig {
    pub key_bits: Vec<bool>,
    #[serde(with = "seed_string")]
    pub plaintext_seed: u64,
    pub chip_rate_hz: f64,
    pub carrier_hz: f64,
    pub amp: f64,
    pub n_load_ffs: u32,
}

/// The FIPS-197 example key, MSB first.
const DEFAULT_KEY: [u8; 16] = [
    0x2b, 0x7e, 0x15, 0x16, 0x28, 0xae, 0xd2, 0xa6, 0xab, 0xf7, 0x15, 0x88, 0x09, 0xcf, 0x4f, 0x3c,
];

pub fn key_bits_from_bytes(key: &[u8; 16]) -> Vec<bool> {
    key.iter()
        .flat_map(|byte| (0..8).rev().map(move |b| (byte >> b) & 1 == 1))
        .collect()
}

impl Default for HtConfig {
    fn default() -> Self {
        HtConfig {
            key_bits: key_bits_from_bytes(&DEFAULT_KEY),
            // Leading 8 bytes of the FIPS-197 example plaintext.
            plaintext_seed: 0x3243_f6a8_885a_308d,
            chip_rate_hz: 5e4,
            carrier_hz: 2.3e7,
            amp: 0.3,
            n_load_ffs: REFERENCE_LOAD_FFS,
        }
    }
}

impl HtConfig {
    /// Amplitude after scaling by the leakage load size.
    pub fn effective_amp(&self) -> f64 {
        self.amp * self.n_load_ffs as f64 / REFERENCE_LOAD_FFS as f64
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.key_bits.len() != KEY_BITS {
            return bad(format!(
                "key_bits must hold {KEY_BITS} bits, got {}",
                self.key_bits.len()
            ));
        }
        if !(self.chip_rate_hz > 0.0 && self.chip_rate_hz.is_finite()) {
            return bad("chip_rate_hz must be > 0".into());
        }
        if !(self.carrier_hz > 0.0 && self.carrier_hz.is_finite()) {
            return bad("carrier_hz must be > 0".into());
        }
        if self.carrier_hz + self.chip_rate_hz >= sample_rate_hz / 2.0 {
            return bad("carrier_hz + chip_rate_hz must be below Nyquist".into());
        }
        if !(self.amp > 0.0 && self.amp.is_finite()) {
            return bad("ht amp must be > 0 (always-on)".into());
        }
        if self.n_load_ffs == 0 {
            return bad("n_load_ffs must be positive".into());
        }
        Ok(())
    }
}

/// Missing fields take their default values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_traces: usize,
    pub n_samples: usize,
    pub sample_rate_hz: f64,
    pub clock_freq_hz: f64,
    pub clock_amp: f64,
    pub modes: Vec<Mode>,
    pub noise_sigma: f64,
    #[serde(with = "seed_string")]
    pub master_seed: u64,
    pub ht: Option<HtConfig>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let mode = |carriers: &[(f64, f64)], dwell: usize| Mode {
            carriers: carriers.to_vec(),
            dwell_samples: dwell,
        };
        SynthConfig {
            n_traces: 200,
            n_samples: 16384,
            sample_rate_hz: 1e8,
            clock_freq_hz: 1e7,
            // The clock strength itself is switched by the operating mode.
            clock_amp: 0.2,
            modes: vec![
                mode(&[(1e7, 0.0), (6.1e6, 0.5), (3.31e7, 0.35)], 150),
                mode(&[(1e7, 0.4), (1.37e7, 0.4), (2.87e7, 0.6)], 230),
                mode(&[(1e7, 0.8), (1.93e7, 0.3), (4.13e7, 0.55)], 310),
                mode(&[(1e7, 1.2), (8.9e6, 0.45), (3.69e7, 0.5)], 90),
            ],
            noise_sigma: 0.2,
            master_seed: 1,
            ht: None,
        }
    }
}

impl SynthConfig {
    pub fn with_ht(mut self, ht: HtConfig) -> Self {
        self.ht = Some(ht);
        self
    }

    pub fn label(&self) -> &'static str {
        if self.ht.is_some() {
            LABEL_HT_INSERTED
        } else {
            LABEL_HT_FREE
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_traces < 2 {
            return bad(format!(
                "TraceSet invariant: n_traces must be at least 2, got {}",
                self.n_traces
            ));
        }
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return bad("sample_rate_hz must be > 0".into());
        }
        let nyquist = self.sample_rate_hz / 2.0;
        if !(self.clock_freq_hz >= 0.0 && self.clock_freq_hz < nyquist) {
            return bad("Nyquist: clock_freq_hz must be below sample_rate_hz/2".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be nonnegative".into());
        }
        if self.modes.is_empty() {
            return bad("modes must be non-empty".into());
        }
        for (i, m) in self.modes.iter().enumerate() {
            if m.dwell_samples == 0 || m.dwell_samples > self.n_samples {
                return bad(format!("mode {i}: dwell_samples must be in 1..=n_samples"));
            }
            for &(f, a) in &m.carriers {
                if !(f >= 0.0 && f < nyquist) {
                    return bad(format!("Nyquist: mode {i} carrier {f} Hz is not below sample_rate_hz/2"));
                }
                if !a.is_finite() {
                    return bad(format!("mode {i}: carrier amplitude must be finite"));
                }
            }
        }
        if let Some(ht) = &self.ht {
            ht.validate(self.sample_rate_hz)?;
        }
        Ok(())
    }
}

/// Pseudorandom ±1 spreading code from the generator seeded with `seed`.
pub fn cdma_chip_sequence(seed: u64, length: usize) -> Vec<i8> {
    let mut rng = Prng::new(seed);
    (0..length)
        .map(|_| if rng.uniform01() >= 0.5 { 1 } else { -1 })
        .collect()
}

/// Always-on leakage: key bits XOR-modulated by the CDMA code, in sign form,
/// keyed onto a carrier.
pub fn ht_leakage_signal(cfg: &HtConfig, n_samples: usize, sample_rate_hz: f64) -> Vec<f64> {
    if n_samples == 0 {
        return Vec::new();
    }
    let chip_index = |i: usize| ((i as f64 / sample_rate_hz) * cfg.chip_rate_hz).floor() as usize;
    let chips = cdma_chip_sequence(cfg.plaintext_seed, chip_index(n_samples - 1) + 1);
    let amp = cfg.effective_amp();
    let omega = 2.0 * std::f64::consts::PI * cfg.carrier_hz;
    (0..n_samples)
        .map(|i| {
            let t = i as f64 / sample_rate_hz;
            let c = chip_index(i);
            let key_sign = if cfg.key_bits[c % KEY_BITS] { 1.0 } else { -1.0 };
            amp * chips[c] as f64 * key_sign * (omega * t).cos()
        })
        .collect()
}

/// Per-trace seed: `master ^ (index * golden)`, with zero remapped.
pub fn trace_seed(master_seed: u64, trace_index: usize) -> u64 {
    let s = master_seed ^ (trace_index as u64).wrapping_mul(ZERO_SEED_REMAP);
    if s == 0 {
        ZERO_SEED_REMAP
    } else {
        s
    }
}

/// Mode schedule of one trace as `(start_sample, mode_index)` pairs.
pub fn mode_schedule(cfg: &SynthConfig, rng: &mut Prng) -> Vec<(usize, usize)> {
    let mut schedule = Vec::new();
    let mut pos = 0;
    while pos < cfg.n_samples {
        let m = rng.index(cfg.modes.len());
        schedule.push((pos, m));
        pos += cfg.modes[m].dwell_samples;
    }
    schedule
}

pub fn synth_trace(
    cfg: &SynthConfig,
    trace_index: usize,
    shared_ht: Option<&[f64]>,
) -> Result<Trace, SynthError> {
    debug_assert!(trace_index < cfg.n_traces);
    let fs = cfg.sample_rate_hz;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut rng = Prng::new(trace_seed(cfg.master_seed, trace_index));
    let schedule = mode_schedule(cfg, &mut rng);

    let mut samples = vec![0.0; cfg.n_samples];
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 / fs;
        *s = cfg.clock_amp * (two_pi * cfg.clock_freq_hz * t).cos();
    }
    for (w, &(start, m)) in schedule.iter().enumerate() {
        let end = schedule.get(w + 1).map_or(cfg.n_samples, |next| next.0);
        for (i, s) in samples.iter_mut().enumerate().take(end).skip(start) {
            let t = i as f64 / fs;
            for &(f, a) in &cfg.modes[m].carriers {
                *s += a * (two_pi * f * t).cos();
            }
        }
    }
    for s in samples.iter_mut() {
        *s += rng.gaussian() * cfg.noise_sigma;
    }
    if let Some(ht) = shared_ht {
        for (s, h) in samples.iter_mut().zip(ht) {
            *s += h;
        }
    }
    Ok(Trace::new(samples, fs)?)
}

pub fn synth_traceset(cfg: &SynthConfig) -> Result<TraceSet, SynthError> {
    cfg.validate()?;
    let ht = cfg
        .ht
        .as_ref()
        .map(|h| ht_leakage_signal(h, cfg.n_samples, cfg.sample_rate_hz));
    let traces = (0..cfg.n_traces)
        .into_par_iter()
        .map(|i| synth_trace(cfg, i, ht.as_deref()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TraceSet::new(traces, cfg.label())?)
}
