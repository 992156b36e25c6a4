//! `catsim` command line: run a scenario, analyze a bag, scaffold an example.
//!
//! Exit codes: 0 success, 1 validation, 2 runtime, 3 I/O.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::recorder::{analyze_bag, read_bag, write_bag, AnalyzeOptions, RecorderError, RunMetrics};
use crate::scenario::{LoadedScenario, ScenarioError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Example scenario written by `init`.
pub const EXAMPLE_SCENARIO: &str = include_str!("../scenarios/two_car.toml");
/// Synthetic leader profile referenced by the example scenario.
pub const EXAMPLE_TRAJECTORY: &str = include_str!("../scenarios/test_data.csv");
const EXAMPLE_TRAJECTORY_FILE: &str = "test_data.csv";

#[derive(Debug, Parser)]
#[command(name = "catsim", version, about = "Leader-follower vehicle simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write its bag directory.
    Run {
        scenario: PathBuf,
        /// Bag output directory [default: <scenario stem>_bag]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a scenario value, e.g. controllers.0.r=2.5 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Compute run metrics from a bag directory.
    Analyze {
        bag_dir: PathBuf,
        /// Print only the single-line JSON record.
        #[arg(long)]
        json_style: bool,
    },
    /// Write the two-vehicle example scenario and its trajectory CSV.
    Init { path: PathBuf },
}

/// Parse `args` (including the program name) and run the command.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Run { scenario, out: dir, set } => cmd_run(&scenario, dir.as_deref(), &set, out, err),
        Command::Analyze { bag_dir, json_style } => cmd_analyze(&bag_dir, json_style, out, err),
        Command::Init { path } => cmd_init(&path, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err((code, message)) => {
            let _ = writeln!(err, "error: {message}");
            code
        }
    }
}

type CliResult = Result<(), (i32, String)>;

fn scenario_error(path: &Path, e: ScenarioError) -> (i32, String) {
    let shown = path.display();
    match e {
        ScenarioError::Io { path: p, source } if p == path && source.kind() == io::ErrorKind::NotFound => {
            (EXIT_IO, format!("no such scenario: {shown}"))
        }
        ScenarioError::Io { .. } => (EXIT_IO, format!("{shown}: {e}")),
        ScenarioError::Syntax { line, column, message } => {
            (EXIT_VALIDATION, format!("{shown}:{line}:{column}: {message}"))
        }
        ScenarioError::Build(_) | ScenarioError::Recorder(_) => (EXIT_RUNTIME, format!("{shown}: {e}")),
        _ => (EXIT_VALIDATION, format!("{shown}: {e}")),
    }
}

fn recorder_error(e: RecorderError) -> (i32, String) {
    let code = match e {
        RecorderError::Io { .. } => EXIT_IO,
        RecorderError::Manifest(_) | RecorderError::Csv { .. } => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    };
    (code, e.to_string())
}

fn io_error(path: &Path, e: io::Error) -> (i32, String) {
    (EXIT_IO, format!("{}: {e}", path.display()))
}

fn default_out_dir(scenario: &Path) -> PathBuf {
    let stem = scenario.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from(format!("{stem}_bag"))
}

pub fn cmd_run(scenario: &Path, out_dir: Option<&Path>, overrides: &[String], out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let loaded = LoadedScenario::from_file(scenario, overrides).map_err(|e| scenario_error(scenario, e))?;
    let bag = loaded.run().map_err(|e| scenario_error(scenario, e))?;
    let dir = out_dir.map_or_else(|| default_out_dir(scenario), Path::to_path_buf);
    let files = write_bag(&bag, &dir).map_err(recorder_error)?;
    let metrics = analyze_bag(&bag, &AnalyzeOptions::default());
    for w in &metrics.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    let _ = writeln!(
        out,
        "wrote {} files to {} ({} ticks)",
        files.len(),
        dir.display(),
        crate::scenario::tick_count(loaded.config.duration, loaded.config.step)
    );
    print_metrics(&metrics, &bag.meta.fingerprint, out).map_err(|e| io_error(&dir, e))
}

pub fn cmd_analyze(bag_dir: &Path, json_only: bool, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let bag = read_bag(bag_dir).map_err(recorder_error)?;
    let metrics = analyze_bag(&bag, &AnalyzeOptions::default());
    for w in &metrics.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    let result = if json_only {
        writeln!(out, "{}", metrics_json(&metrics))
    } else {
        print_metrics(&metrics, &bag.meta.fingerprint, out)
    };
    result.map_err(|e| io_error(bag_dir, e))
}

pub fn cmd_init(path: &Path, out: &mut dyn Write) -> CliResult {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let csv = dir.join(EXAMPLE_TRAJECTORY_FILE);
    for target in [path, csv.as_path()] {
        if target.exists() {
            return Err((EXIT_VALIDATION, format!("refusing to overwrite {}", target.display())));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    std::fs::write(path, EXAMPLE_SCENARIO).map_err(|e| io_error(path, e))?;
    std::fs::write(&csv, EXAMPLE_TRAJECTORY).map_err(|e| io_error(&csv, e))?;
    let _ = writeln!(out, "wrote {} and {}", path.display(), csv.display());
    Ok(())
}

pub fn metrics_json(metrics: &RunMetrics) -> String {
    serde_json::to_string(metrics).expect("metrics serialize")
}

fn opt(v: Option<f64>, unit: &str) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{v:.3} {unit}"))
}

fn print_metrics(m: &RunMetrics, fingerprint: &str, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "{:<28} {}", "fingerprint", fingerprint)?;
    writeln!(out, "{:<28} {}", "min_gap", opt(m.min_gap, "m"))?;
    writeln!(out, "{:<28} {}", "collision", if m.collision { "yes" } else { "no" })?;
    for (robot, v) in &m.mean_speed {
        writeln!(out, "{:<28} {v:.3} m/s", format!("mean_speed[{robot}]"))?;
    }
    for (robot, s) in &m.headway {
        let band = s
            .band
            .map_or_else(|| "-".to_owned(), |(lo, hi)| format!("[{lo:.3}, {hi:.3}] m"));
        writeln!(out, "{:<28} {band}", format!("headway_band[{robot}]"))?;
        writeln!(out, "{:<28} {}", format!("settling_time[{robot}]"), opt(s.settling_time, "s"))?;
    }
    writeln!(out, "{}", metrics_json(m))
}
