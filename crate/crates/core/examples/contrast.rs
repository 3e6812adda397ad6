//! Runs the full sweep on synthetic HT-free and HT-inserted ensembles and
//! prints both median profiles.
//!
//! Usage: cargo run --release --example contrast [synth_config.json] [sweep_config.json]

use std::time::Instant;

use emscope_core::detector::{decide, scale_sweep, SweepConfig, Thresholds};
use emscope_core::spectral::{ensemble_spectra, StftParams, DEFAULT_EPS_REL};
use emscope_core::synth::{synth_traceset, SynthConfig};

fn load<T: serde::de::DeserializeOwned + Default>(path: Option<String>) -> T {
    path.map(|p| serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap())
        .unwrap_or_default()
}

fn main() {
    let mut args = std::env::args().skip(1);
    let synth: SynthConfig = load(args.next());
    let sweep: SweepConfig = load(args.next());
    let ht = synth.ht.clone().unwrap_or_default();
    let free_cfg = SynthConfig { ht: None, ..synth.clone() };
    let ht_cfg = SynthConfig { ht: Some(ht.clone()), ..synth };

    for cfg in [&free_cfg, &ht_cfg] {
        let start = Instant::now();
        let ts = synth_traceset(cfg).unwrap();
        let spectra = ensemble_spectra(&ts, &StftParams::half_overlap(200), DEFAULT_EPS_REL).unwrap();
        let carrier_bin = (ht.carrier_hz * 200.0 / cfg.sample_rate_hz).round() as usize;
        let argmax = spectra.stability.argmax_per_time_bin();
        let hits = argmax.iter().filter(|&&b| b == carrier_bin).count();
        let profile = scale_sweep(&ts, &sweep).unwrap();
        let verdict = decide(&profile, &Thresholds::default());
        println!(
            "{:12} medians={:?} verdict={} range={} mom={} carrier-argmax={}/{} ({:.1}s)",
            ts.label(),
            profile.medians(),
            verdict.decision,
            verdict.range_stat,
            verdict.median_of_medians,
            hits,
            argmax.len(),
            start.elapsed().as_secs_f64()
        );
        for w in &profile.windows {
            let mut hist = [0usize; 13];
            for &k in &w.k_distribution {
                hist[k] += 1;
            }
            println!("  w={:3} hist={:?}", w.window_len, &hist[1..]);
        }
    }
}
