//! Reference-free detection of always-on hardware Trojans from ensembles of
//! EM side-channel traces.
//!
//! Pipeline: [`trace_io`] loads an ensemble, [`spectral`] turns it into
//! ensemble stability maps at several STFT window sizes, [`gmm`] selects a
//! mixture order per time bin by BIC, and [`detector`] judges how consistent
//! the median order is across window sizes. [`synth`] generates ensembles
//! with and without a CDMA leakage Trojan.

pub mod detector;
pub mod gmm;
pub mod rng;
pub mod spectral;
pub mod synth;
pub mod trace_io;

pub use detector::{decide, scale_sweep, Decision, ScaleProfile, SweepConfig, Thresholds, Verdict};
pub use gmm::{select_order, FitConfig, GmmModel};
pub use rng::Prng;
pub use spectral::{Spectrogram, StabilityMap, StftParams};
pub use synth::{synth_traceset, HtConfig, SynthConfig};
pub use trace_io::{CsvOptions, Trace, TraceSet};
