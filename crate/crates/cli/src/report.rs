use serde::{Deserialize, Serialize};

use emscope_core::detector::{ScaleProfile, SweepConfig, Thresholds, Verdict, WindowProfile};

pub const TOOL_NAME: &str = "emscope";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        ToolInfo {
            name: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputInfo {
    pub path: String,
    pub label: String,
    /// SHA-256 of the generating synth config, when the directory has a manifest.
    pub synth_config_sha256: Option<String>,
    pub n_traces: usize,
    pub n_samples: usize,
    pub sample_rate_hz: f64,
    pub truncated_traces: usize,
    pub skipped_files: Vec<SkippedFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub load_seconds: f64,
    pub sweep_seconds: f64,
}

/// Sweep configuration file: the sweep settings plus optional decision
/// thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepFile {
    #[serde(flatten)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: ToolInfo,
    pub input: InputInfo,
    pub sweep_config: SweepConfig,
    pub windows: Vec<WindowProfile>,
    pub verdict: Verdict,
    /// Wall-clock timings; only present when requested, because they break
    /// byte reproducibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl Report {
    pub fn new(input: InputInfo, profile: ScaleProfile, verdict: Verdict) -> Self {
        Report {
            tool: ToolInfo::default(),
            input,
            sweep_config: profile.config,
            windows: profile.windows,
            verdict,
            timing: None,
        }
    }

    pub fn profile(&self) -> ScaleProfile {
        ScaleProfile {
            label: self.input.label.clone(),
            config: self.sweep_config.clone(),
            windows: self.windows.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn summary_line(&self) -> String {
        format!(
            "verdict={} range={} median={}",
            self.verdict.decision, self.verdict.range_stat, self.verdict.median_of_medians
        )
    }
}
