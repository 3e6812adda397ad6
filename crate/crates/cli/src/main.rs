use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use emscope::commands::{cmd_compare, cmd_spectrogram, cmd_sweep, cmd_synth, SweepArgs};
use emscope::error::{CliError, EXIT_INPUT};

#[derive(Parser)]
#[command(name = "emscope", version, about = "Reference-free Trojan screening of EM trace ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace ensemble as a CSV directory.
    Synth {
        /// Synth config JSON.
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Insert the always-on leakage Trojan.
        #[arg(long)]
        ht: bool,
    },
    /// Run the cross-scale sweep on a trace directory and print the verdict.
    Sweep {
        /// Directory of CSV traces.
        dir: PathBuf,
        /// Sweep config JSON (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the median-k profile SVG into this directory.
        #[arg(long)]
        plots: Option<PathBuf>,
        /// Add wall-clock timings to the report.
        #[arg(long)]
        timing: bool,
    },
    /// Mean, variance and stability heatmaps for one window size.
    Spectrogram {
        dir: PathBuf,
        #[arg(long)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay the profiles of two or more reports in one chart.
    Compare {
        #[arg(required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("EMSCOPE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Input(format!("EMSCOPE_THREADS: not a thread count: {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(CliError::input)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Synth { config, out, ht } => {
            let m = cmd_synth(&config, &out, ht)?;
            println!("wrote {} traces label={} to {}", m.n_traces, m.label, out.display());
        }
        Command::Sweep {
            dir,
            config,
            report,
            plots,
            timing,
        } => {
            let r = cmd_sweep(&SweepArgs {
                dir,
                config,
                report,
                plots,
                timing,
            })?;
            println!("{}", r.summary_line());
        }
        Command::Spectrogram { dir, window, out } => {
            for p in cmd_spectrogram(&dir, window, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Compare { reports, out } => {
            cmd_compare(&reports, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INPUT as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
