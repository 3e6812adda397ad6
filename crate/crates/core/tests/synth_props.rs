use rustfft::{num_complex::Complex, FftPlanner};

use emscope_core::synth::{
    cdma_chip_sequence, ht_leakage_signal, synth_trace, synth_traceset, HtConfig, Mode, SynthConfig,
};

fn small(n_traces: usize, n_samples: usize) -> SynthConfig {
    SynthConfig {
        n_traces,
        n_samples,
        ..SynthConfig::default()
    }
}

#[test]
fn traceset_is_a_pure_function_of_config() {
    let cfg = small(6, 1024).with_ht(HtConfig::default());
    assert_eq!(synth_traceset(&cfg).unwrap(), synth_traceset(&cfg).unwrap());
}

#[test]
fn five_hundred_trace_set_is_labeled_ht_free() {
    let ts = synth_traceset(&small(500, 1024)).unwrap();
    assert_eq!(ts.n_traces(), 500);
    assert_eq!(ts.label(), "ht_free");
}

#[test]
fn chip_sequence_mean_concentrates() {
    let chips = cdma_chip_sequence(0x1234_5678, 100_000);
    let mean = chips.iter().map(|&c| c as f64).sum::<f64>() / chips.len() as f64;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert_eq!(chips, cdma_chip_sequence(0x1234_5678, 100_000));
}

#[test]
fn zero_amp_leakage_is_silent() {
    let ht = HtConfig {
        amp: 0.0,
        ..HtConfig::default()
    };
    assert!(ht_leakage_signal(&ht, 4096, 1e8).iter().all(|&v| v == 0.0));
}

#[test]
fn leakage_is_the_same_in_every_trace() {
    let ht = HtConfig::default();
    let free = small(5, 2048);
    let inserted = free.clone().with_ht(ht.clone());
    let leak = ht_leakage_signal(&ht, free.n_samples, free.sample_rate_hz);
    let a = synth_traceset(&free).unwrap();
    let b = synth_traceset(&inserted).unwrap();
    for (ta, tb) in a.traces().iter().zip(b.traces()) {
        for ((x, y), h) in ta.samples().iter().zip(tb.samples()).zip(&leak) {
            assert!((y - x - h).abs() < 1e-12);
        }
    }
}

#[test]
fn leakage_is_present_in_every_dwell_window() {
    let ht = HtConfig::default();
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        ..small(8, 16384)
    }
    .with_ht(ht.clone());
    let leak = ht_leakage_signal(&ht, cfg.n_samples, cfg.sample_rate_hz);
    let dwell = cfg.modes.iter().map(|m| m.dwell_samples).min().unwrap();
    for i in 0..cfg.n_traces {
        let t = synth_trace(&cfg, i, Some(&leak)).unwrap();
        for (w, (xs, hs)) in t.samples().chunks(dwell).zip(leak.chunks(dwell)).enumerate() {
            let corr: f64 = xs.iter().zip(hs).map(|(x, h)| x * h).sum();
            assert!(corr > 0.0, "trace {i} window {w}: correlation {corr}");
        }
    }
}

#[test]
fn noise_free_trace_has_no_aliased_energy() {
    // Every frequency is a multiple of fs/n, so each component lands on
    // exactly one bin and an image at fs - f would show up elsewhere.
    let n = 1000;
    let cfg = SynthConfig {
        n_traces: 2,
        n_samples: n,
        noise_sigma: 0.0,
        modes: vec![Mode {
            carriers: vec![(6.1e6, 0.5), (3.31e7, 0.35), (4.13e7, 0.55)],
            dwell_samples: n,
        }],
        ..SynthConfig::default()
    };
    let t = synth_trace(&cfg, 0, None).unwrap();
    let mut buf: Vec<Complex<f64>> = t.samples().iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mags: Vec<f64> = buf[..=n / 2].iter().map(|c| c.norm()).collect();
    let peak = mags.iter().copied().fold(0.0, f64::max);
    let bin = |f: f64| (f * n as f64 / cfg.sample_rate_hz).round() as usize;
    let components: Vec<usize> = [cfg.clock_freq_hz, 6.1e6, 3.31e7, 4.13e7].iter().map(|&f| bin(f)).collect();
    for (b, m) in mags.iter().enumerate() {
        if !components.contains(&b) {
            assert!(m / peak < 1e-9, "bin {b}: {}", m / peak);
        }
    }
}

#[test]
fn ensemble_spread_matches_noise_sigma_with_identical_modes() {
    let cfg = SynthConfig {
        n_traces: 200,
        n_samples: 1024,
        modes: vec![Mode {
            carriers: vec![(1.37e7, 0.4), (2.87e7, 0.6)],
            dwell_samples: 1024,
        }],
        ..SynthConfig::default()
    };
    let ts = synth_traceset(&cfg).unwrap();
    let n = ts.n_traces() as f64;
    let stds: Vec<f64> = (0..cfg.n_samples)
        .map(|j| {
            let col: Vec<f64> = ts.traces().iter().map(|t| t.samples()[j]).collect();
            let m = col.iter().sum::<f64>() / n;
            (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    let mean_std = stds.iter().sum::<f64>() / stds.len() as f64;
    assert!((mean_std / cfg.noise_sigma - 1.0).abs() < 0.1, "mean std {mean_std}");
    let within = stds
        .iter()
        .filter(|s| (*s / cfg.noise_sigma - 1.0).abs() < 0.1)
        .count();
    assert!(within as f64 >= 0.9 * stds.len() as f64, "{within} of {}", stds.len());
}
