//! Acceptance criteria, run sequentially with one PASS/FAIL line each.
//! Exits non-zero when any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use emscope::commands::{cmd_spectrogram, cmd_sweep, cmd_synth, SweepArgs};
use emscope::fsutil::sha256_hex;
use emscope::report::SweepFile;
use emscope_core::detector::{decide, scale_sweep, trend_violations, Decision};
use emscope_core::gmm::{em_fit_traced, select_order, standardize, FitConfig};
use emscope_core::rng::{derive_seed, Prng};
use emscope_core::spectral::{ensemble_spectra, stft, StftParams, WindowFn, DEFAULT_EPS_REL};
use emscope_core::synth::{synth_traceset, SynthConfig};
use emscope_core::trace_io::{load_trace_dir, write_csv_trace, CsvOptions, Trace};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn frozen_synth() -> SynthConfig {
    let text = fs::read_to_string(configs_dir().join("synth_default.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn frozen_sweep() -> SweepFile {
    let text = fs::read_to_string(configs_dir().join("sweep_default.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Samples `n` points from a 2-D Gaussian mixture with the given means,
/// per-axis standard deviations and rotation angles.
fn sample_mixture(
    rng: &mut Prng,
    n: usize,
    means: &[[f64; 2]],
    stds: &[[f64; 2]],
    angles: &[f64],
) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let j = rng.index(means.len());
            let (a, b) = (rng.gaussian() * stds[j][0], rng.gaussian() * stds[j][1]);
            let (s, c) = angles[j].sin_cos();
            [means[j][0] + c * a - s * b, means[j][1] + s * a + c * b]
        })
        .collect()
}

fn em_monotonicity() -> Outcome {
    let start = Instant::now();
    let cfg = FitConfig::default();
    let mut worst_drop = 0.0f64;
    let mut iterations = 0usize;
    let mut floor_steps = 0usize;
    for d in 0..100u64 {
        let mut rng = Prng::new(derive_seed(&[0xC1, d]));
        let n = 50 + rng.index(1951);
        let k = 1 + rng.index(6);
        let means: Vec<[f64; 2]> = (0..k)
            .map(|_| [rng.uniform01() * 20.0 - 10.0, rng.uniform01() * 20.0 - 10.0])
            .collect();
        let stds: Vec<[f64; 2]> = (0..k)
            .map(|_| [0.3 + 1.7 * rng.uniform01(), 0.3 + 1.7 * rng.uniform01()])
            .collect();
        let angles: Vec<f64> = (0..k).map(|_| rng.uniform01() * std::f64::consts::PI).collect();
        let points = sample_mixture(&mut rng, n, &means, &stds, &angles);
        let (std_points, _) = standardize(&points).unwrap();
        let (_, traces) = em_fit_traced(&std_points, k, &cfg, &mut rng).unwrap();
        for t in &traces {
            // Steps whose M-step had to floor a covariance leave the EM
            // update and may lower the likelihood; they are counted apart.
            for (w, &floored) in t.log_likelihoods.windows(2).zip(&t.floor_hits) {
                iterations += 1;
                if floored {
                    floor_steps += 1;
                } else {
                    worst_drop = worst_drop.max(w[0] - w[1]);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_drop <= 1e-9 && secs < 60.0,
        format!("100 datasets, {iterations} EM steps ({floor_steps} floored, exempt), worst LL drop {worst_drop:.3e} (limit 1e-9), {secs:.1} s (limit 60 s)"),
    )
}

fn bic_order_recovery() -> Outcome {
    let start = Instant::now();
    let cfg = FitConfig::default();
    let mut hits = 0;
    let mut misses = Vec::new();
    for d in 0..100u64 {
        let mut rng = Prng::new(derive_seed(&[0xC2, d]));
        let k = 1 + (d % 4) as usize;
        let stds: Vec<[f64; 2]> = (0..k)
            .map(|_| [0.5 + 0.5 * rng.uniform01(), 0.5 + 0.5 * rng.uniform01()])
            .collect();
        let angles: Vec<f64> = (0..k).map(|_| rng.uniform01() * std::f64::consts::PI).collect();
        // Largest per-axis std is at most 1, so 6 units is at least 6 sigma.
        let mut means: Vec<[f64; 2]> = Vec::new();
        while means.len() < k {
            let m = [rng.uniform01() * 30.0 - 15.0, rng.uniform01() * 30.0 - 15.0];
            if means
                .iter()
                .all(|o| ((o[0] - m[0]).powi(2) + (o[1] - m[1]).powi(2)).sqrt() >= 6.0)
            {
                means.push(m);
            }
        }
        let points = sample_mixture(&mut rng, 2000, &means, &stds, &angles);
        let selected = select_order(&points, &cfg).unwrap().best.k;
        if selected == k {
            hits += 1;
        } else {
            misses.push(format!("#{d}: true {k} got {selected}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        hits >= 95 && secs < 120.0,
        format!(
            "recovered {hits}/100 (need 95), {secs:.1} s (limit 120 s){}",
            if misses.is_empty() { String::new() } else { format!("; misses: {}", misses.join(", ")) }
        ),
    )
}

fn spectral_correctness() -> Outcome {
    let mut worst_parseval = 0.0f64;
    let mut rng = Prng::new(0xC3);
    for &len in &[120usize, 200, 333, 480] {
        let params = StftParams {
            window_len: len,
            hop: len,
            window_fn: WindowFn::Hann,
        };
        let window = emscope_core::spectral::make_window(WindowFn::Hann, len);
        for _ in 0..50 {
            let x: Vec<f64> = (0..len).map(|_| rng.gaussian() * 3.0 + 0.5).collect();
            let time_energy: f64 = x.iter().zip(&window).map(|(v, w)| (v * w).powi(2)).sum();
            let spec = stft(&Trace::new(x, 1e6).unwrap(), &params).unwrap();
            let mags = spec.values.row(0);
            // One-sided magnitudes: interior bins stand for two conjugate bins.
            let mut freq_energy = 0.0;
            for (b, m) in mags.iter().enumerate() {
                let nyquist = len % 2 == 0 && b == len / 2;
                freq_energy += if b == 0 || nyquist { m * m } else { 2.0 * m * m };
            }
            freq_energy /= len as f64;
            worst_parseval = worst_parseval.max((freq_energy - time_energy).abs() / time_energy);
        }
    }

    let mut worst_tone = 0.0f64;
    let mut worst_leak = 0.0f64;
    for &(len, k0, amp) in &[(120usize, 7usize, 1.0f64), (200, 46, 0.3), (333, 100, 2.5), (480, 1, 4.0)] {
        let x: Vec<f64> = (0..len)
            .map(|n| amp * (2.0 * std::f64::consts::PI * (k0 * n) as f64 / len as f64).cos())
            .collect();
        let params = StftParams {
            window_len: len,
            hop: len,
            window_fn: WindowFn::Rectangular,
        };
        let spec = stft(&Trace::new(x, 1e6).unwrap(), &params).unwrap();
        let mags = spec.values.row(0);
        let expected = amp * len as f64 / 2.0;
        worst_tone = worst_tone.max((mags[k0] - expected).abs() / expected);
        for (b, m) in mags.iter().enumerate() {
            if b != k0 {
                worst_leak = worst_leak.max(m / expected);
            }
        }
    }
    outcome(
        worst_parseval <= 1e-9 && worst_tone <= 1e-9 && worst_leak <= 1e-9,
        format!(
            "Parseval worst rel err {worst_parseval:.2e}, tone worst rel err {worst_tone:.2e}, worst leakage {worst_leak:.2e} (limit 1e-9)"
        ),
    )
}

fn stability_discrimination() -> Outcome {
    let cfg = frozen_synth();
    let ht = cfg.ht.clone().unwrap_or_default();
    let cfg = SynthConfig {
        ht: Some(ht.clone()),
        ..cfg
    };
    let ts = synth_traceset(&cfg).unwrap();
    let spectra = ensemble_spectra(&ts, &StftParams::half_overlap(200), DEFAULT_EPS_REL).unwrap();
    let carrier_bin = (ht.carrier_hz * 200.0 / cfg.sample_rate_hz).round() as usize;
    let argmax = spectra.stability.argmax_per_time_bin();
    let hits = argmax.iter().filter(|&&b| b == carrier_bin).count();
    let frac = hits as f64 / argmax.len() as f64;
    outcome(
        frac >= 0.95,
        format!(
            "carrier bin {carrier_bin} is the argmax in {hits}/{} time bins ({:.1}%, need 95%)",
            argmax.len(),
            frac * 100.0
        ),
    )
}

fn cross_scale_contrast() -> Outcome {
    let start = Instant::now();
    let base = frozen_synth();
    let sweep = frozen_sweep();
    let ht = base.ht.clone().unwrap_or_default();
    let mut lines = Vec::new();
    let mut pass = true;
    for ht_cfg in [None, Some(ht)] {
        let inserted = ht_cfg.is_some();
        let cfg = SynthConfig { ht: ht_cfg, ..base.clone() };
        let ts = synth_traceset(&cfg).unwrap();
        let profile = scale_sweep(&ts, &sweep.sweep).unwrap();
        let verdict = decide(&profile, &sweep.thresholds);
        let medians = profile.medians();
        let violations = trend_violations(&medians);
        let ok = if inserted {
            verdict.range_stat <= 1.0
                && verdict.median_of_medians <= 4.0
                && verdict.decision == Decision::HtSuspected
        } else {
            verdict.range_stat >= 3.0
                && violations <= 1
                && verdict.decision == Decision::HtFreeConsistent
        };
        pass &= ok;
        lines.push(format!(
            "{} medians {:?} range {} median {} violations {} -> {}{}",
            profile.label,
            medians,
            verdict.range_stat,
            verdict.median_of_medians,
            violations,
            verdict.decision,
            if ok { "" } else { " (unexpected)" }
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 300.0;
    lines.push(format!("{secs:.1} s (limit 300 s)"));
    outcome(pass, lines.join("; "))
}

/// Small ensemble used by the determinism, scale and round-trip checks.
fn small_config() -> SynthConfig {
    SynthConfig {
        n_traces: 24,
        n_samples: 2048,
        ..frozen_synth()
    }
}

fn write_config(dir: &Path, cfg: &SynthConfig) -> PathBuf {
    let path = dir.join("synth.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn file_hash(path: &Path) -> String {
    sha256_hex(&fs::read(path).unwrap())
}

fn sweep_args(dir: &Path, out: &Path, tag: &str) -> SweepArgs {
    SweepArgs {
        dir: dir.to_path_buf(),
        config: Some(configs_dir().join("sweep_default.json")),
        report: Some(out.join(format!("report_{tag}.json"))),
        plots: Some(out.join(format!("plots_{tag}"))),
        timing: false,
    }
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    traces: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let cfg_path = write_config(&root, &small_config());
    let traces = root.join("traces");
    cmd_synth(&cfg_path, &traces, true).unwrap();
    Fixture {
        _tmp: tmp,
        root,
        traces,
    }
}

fn determinism(fx: &Fixture) -> Outcome {
    let mut report_hashes = Vec::new();
    let mut svg_hashes = Vec::new();
    for tag in ["a", "b"] {
        let args = sweep_args(&fx.traces, &fx.root, tag);
        cmd_sweep(&args).unwrap();
        report_hashes.push(file_hash(args.report.as_ref().unwrap()));
        let mut hashes = vec![file_hash(&args.plots.as_ref().unwrap().join("profile.svg"))];
        let spec_dir = fx.root.join(format!("spec_{tag}"));
        let mut written = cmd_spectrogram(&fx.traces, 200, &spec_dir).unwrap();
        written.sort();
        hashes.extend(written.iter().map(|p| file_hash(p)));
        svg_hashes.push(hashes);
    }
    let pass = report_hashes[0] == report_hashes[1] && svg_hashes[0] == svg_hashes[1];
    outcome(
        pass,
        format!(
            "report sha256 {} vs {}; {} figure/matrix files identical: {}",
            &report_hashes[0][..16],
            &report_hashes[1][..16],
            svg_hashes[0].len(),
            svg_hashes[0] == svg_hashes[1]
        ),
    )
}

fn scale_invariance(fx: &Fixture) -> Outcome {
    let scaled_dir = fx.root.join("traces_x7.3");
    fs::create_dir_all(&scaled_dir).unwrap();
    let loaded = load_trace_dir(&fx.traces, &CsvOptions::default()).unwrap();
    for (i, t) in loaded.set.traces().iter().enumerate() {
        let path = scaled_dir.join(format!("trace_{i:04}.csv"));
        fs::write(path, write_csv_trace(&t.scaled(7.3))).unwrap();
    }
    let original = cmd_sweep(&sweep_args(&fx.traces, &fx.root, "a")).unwrap();
    let scaled = cmd_sweep(&sweep_args(&scaled_dir, &fx.root, "scaled")).unwrap();
    let k_table = |r: &emscope::Report| -> Vec<Vec<Option<usize>>> {
        r.windows
            .iter()
            .map(|w| w.bins.iter().map(|b| b.k).collect())
            .collect()
    };
    let same_k = k_table(&original) == k_table(&scaled);
    let same_medians = original.profile().medians() == scaled.profile().medians();
    let same_verdict = original.verdict.decision == scaled.verdict.decision;
    outcome(
        same_k && same_medians && same_verdict,
        format!(
            "k tables equal: {same_k}, medians equal: {same_medians} ({:?}), verdict equal: {same_verdict} ({})",
            original.profile().medians(),
            original.verdict.decision
        ),
    )
}

fn csv_round_trip(fx: &Fixture) -> Outcome {
    let cfg = SynthConfig {
        ht: Some(small_config().ht.unwrap_or_default()),
        ..small_config()
    };
    let sweep = frozen_sweep();
    let in_memory = scale_sweep(&synth_traceset(&cfg).unwrap(), &sweep.sweep).unwrap();
    let from_csv = cmd_sweep(&sweep_args(&fx.traces, &fx.root, "a")).unwrap().profile();
    outcome(
        in_memory == from_csv,
        format!(
            "profiles identical: {} (label {}, medians {:?})",
            in_memory == from_csv,
            from_csv.label,
            from_csv.medians()
        ),
    )
}

fn main() -> ExitCode {
    // Free arguments select criteria by substring; flags from the test
    // runner are ignored.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        if !selected(name) {
            return;
        }
        let start = Instant::now();
        let o = f();
        println!(
            "[{}] {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        results.push((name, o));
    };
    run("1 EM monotonicity", &em_monotonicity);
    run("2 BIC order recovery", &bic_order_recovery);
    run("3 spectral correctness", &spectral_correctness);
    run("4 stability-map discrimination", &stability_discrimination);
    run("5 end-to-end cross-scale contrast", &cross_scale_contrast);
    let fx = std::cell::OnceCell::new();
    let fx = || fx.get_or_init(fixture);
    run("6 determinism", &|| determinism(fx()));
    run("7 scale invariance", &|| scale_invariance(fx()));
    run("8 CSV round-trip", &|| csv_round_trip(fx()));

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
