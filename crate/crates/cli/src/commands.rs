use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use emscope_core::detector::{decide, scale_sweep};
use emscope_core::spectral::{ensemble_spectra, Matrix, StftParams, DEFAULT_EPS_REL};
use emscope_core::synth::{synth_traceset, SynthConfig};
use emscope_core::trace_io::{load_trace_dir_labeled, write_csv_trace, CsvOptions, LoadedTraces};

use crate::error::CliError;
use crate::fsutil::{sha256_hex, write_atomic};
use crate::report::{InputInfo, Report, SkippedFile, SweepFile, Timing};
use crate::svg::{render_heatmap_svg, render_profile_svg, render_profiles_svg, HeatmapAxes};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROFILE_SVG: &str = "profile.svg";

/// Written next to synthesized traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub label: String,
    pub n_traces: usize,
    pub n_samples: usize,
    pub sample_rate_hz: f64,
    pub config_sha256: String,
    pub config: SynthConfig,
    pub files: Vec<String>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("ConfigRead: {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("ConfigParse: {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes)
        .map_err(|e| CliError::Pipeline(format!("Io: {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("Io: {}: {e}", dir.display())))
}

/// Content hash of a synth config in its canonical JSON form.
pub fn config_hash(cfg: &SynthConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

/// Generates a synthetic ensemble and writes it as one CSV per trace plus a
/// manifest. With `ht` set, the config's Trojan block (or the default one) is
/// enabled; without it, any Trojan block is dropped.
pub fn cmd_synth(config: &Path, out: &Path, ht: bool) -> Result<Manifest, CliError> {
    let mut cfg: SynthConfig = read_json(config)?;
    cfg.ht = if ht { Some(cfg.ht.unwrap_or_default()) } else { None };
    cfg.validate().map_err(CliError::input)?;

    ensure_dir(out)?;
    let occupied = fs::read_dir(out)
        .map_err(|e| CliError::Input(format!("Io: {}: {e}", out.display())))?
        .filter_map(|e| e.ok())
        .any(|e| {
            e.path()
                .extension()
                .map(|x| x.eq_ignore_ascii_case("csv"))
                .unwrap_or(false)
        });
    if occupied {
        return Err(CliError::Input(format!(
            "OutputNotEmpty: {} already contains CSV traces",
            out.display()
        )));
    }

    let ts = synth_traceset(&cfg).map_err(CliError::input)?;
    let width = ts.n_traces().saturating_sub(1).to_string().len().max(4);
    let mut files = Vec::with_capacity(ts.n_traces());
    for (i, trace) in ts.traces().iter().enumerate() {
        let name = format!("trace_{i:0width$}.csv");
        write_file(&out.join(&name), write_csv_trace(trace).as_bytes())?;
        files.push(name);
    }
    let manifest = Manifest {
        label: ts.label().to_string(),
        n_traces: ts.n_traces(),
        n_samples: ts.n_samples(),
        sample_rate_hz: ts.sample_rate_hz(),
        config_sha256: config_hash(&cfg),
        config: cfg,
        files,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_file(&out.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

fn read_manifest(dir: &Path) -> Result<Option<Manifest>, CliError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}

/// Loads a trace directory, labeled from its manifest when present.
pub fn load_dir(dir: &Path) -> Result<(LoadedTraces, Option<Manifest>), CliError> {
    let manifest = read_manifest(dir)?;
    let label = manifest.as_ref().map_or("unknown", |m| m.label.as_str());
    let loaded =
        load_trace_dir_labeled(dir, &CsvOptions::default(), label).map_err(CliError::input)?;
    Ok((loaded, manifest))
}

#[derive(Debug, Clone, Default)]
pub struct SweepArgs {
    pub dir: PathBuf,
    pub config: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub plots: Option<PathBuf>,
    pub timing: bool,
}

/// Load, sweep and decide. The verdict is data: a computed decision of any
/// kind is a success.
pub fn cmd_sweep(args: &SweepArgs) -> Result<Report, CliError> {
    let file: SweepFile = match &args.config {
        Some(p) => read_json(p)?,
        None => SweepFile::default(),
    };
    let started = Instant::now();
    let (loaded, manifest) = load_dir(&args.dir)?;
    let load_seconds = started.elapsed().as_secs_f64();
    let ts = &loaded.set;
    file.sweep.validate(ts.n_samples()).map_err(CliError::input)?;

    let started = Instant::now();
    let profile = scale_sweep(ts, &file.sweep).map_err(CliError::pipeline)?;
    let sweep_seconds = started.elapsed().as_secs_f64();
    let verdict = decide(&profile, &file.thresholds);

    let input = InputInfo {
        path: args.dir.display().to_string(),
        label: ts.label().to_string(),
        synth_config_sha256: manifest.map(|m| m.config_sha256),
        n_traces: ts.n_traces(),
        n_samples: ts.n_samples(),
        sample_rate_hz: ts.sample_rate_hz(),
        truncated_traces: loaded.truncated_traces,
        skipped_files: loaded
            .skipped_files
            .iter()
            .map(|(file, reason)| SkippedFile {
                file: file.clone(),
                reason: reason.clone(),
            })
            .collect(),
    };
    let mut report = Report::new(input, profile, verdict);
    if args.timing {
        report.timing = Some(Timing {
            load_seconds,
            sweep_seconds,
        });
    }

    if let Some(path) = &args.report {
        write_file(path, report.to_json().as_bytes())?;
    }
    if let Some(dir) = &args.plots {
        ensure_dir(dir)?;
        render_profile_svg(&report.profile(), &dir.join(PROFILE_SVG))
            .map_err(|e| CliError::Pipeline(format!("Io: {e}")))?;
    }
    Ok(report)
}

/// Frequency-by-time view of a `[time x freq]` matrix: highest frequency on
/// top, time increasing to the right.
fn freq_time_view(values: &Matrix) -> Matrix {
    let t = values.transpose();
    let rows: Vec<Vec<f64>> = (0..t.rows()).rev().map(|r| t.row(r).to_vec()).collect();
    Matrix::from_rows(&rows)
}

pub const SPECTROGRAM_OUTPUTS: [&str; 3] = ["mean", "variance", "stability"];

/// Mean, variance and stability heatmaps (SVG plus CSV) for one window size.
pub fn cmd_spectrogram(dir: &Path, window: usize, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (loaded, _) = load_dir(dir)?;
    let ts = &loaded.set;
    let params = StftParams::half_overlap(window);
    params.validate(ts.n_samples()).map_err(CliError::input)?;
    let spectra = ensemble_spectra(ts, &params, DEFAULT_EPS_REL).map_err(CliError::pipeline)?;
    ensure_dir(out)?;

    let degenerate = !(spectra.mean.values.max() > 0.0);
    let note = degenerate.then_some("degenerate input");
    let freq = &spectra.mean.freq_axis_hz;
    let time = &spectra.mean.time_axis_s;
    let axes = |title: &str| HeatmapAxes {
        title: format!("{title} (window {window}, label {})", ts.label()),
        x_label: "time (s)".into(),
        y_label: "frequency (Hz)".into(),
        x_range: (time[0], time[time.len() - 1]),
        y_range: (freq[freq.len() - 1], freq[0]),
    };

    let items = [
        ("mean", "Ensemble mean magnitude", &spectra.mean.values, spectra.mean.to_csv()),
        (
            "variance",
            "Ensemble magnitude variance",
            &spectra.variance.values,
            spectra.variance.to_csv(),
        ),
        ("stability", "Stability map", &spectra.stability.scores, spectra.stability.to_csv()),
    ];
    let mut written = Vec::new();
    for (name, title, values, csv) in items {
        let csv_path = out.join(format!("{name}_w{window}.csv"));
        write_file(&csv_path, csv.as_bytes())?;
        let svg_path = out.join(format!("{name}_w{window}.svg"));
        render_heatmap_svg(&freq_time_view(values), &axes(title), note, &svg_path)
            .map_err(|e| CliError::Pipeline(format!("Io: {e}")))?;
        written.push(csv_path);
        written.push(svg_path);
    }
    Ok(written)
}

/// Overlays the profiles of several reports in one chart.
pub fn cmd_compare(reports: &[PathBuf], out: &Path) -> Result<(), CliError> {
    if reports.is_empty() {
        return Err(CliError::Input("NoReports: at least one report is required".into()));
    }
    let profiles = reports
        .iter()
        .map(|p| read_json::<Report>(p).map(|r| r.profile()))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(p) = profiles.iter().find(|p| p.windows.is_empty()) {
        return Err(CliError::Input(format!("EmptyProfile: report {} has no windows", p.label)));
    }
    render_profiles_svg(&profiles, out).map_err(|e| CliError::Pipeline(format!("Io: {e}")))
}
