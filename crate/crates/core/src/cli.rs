//! Command implementations behind the `vtr` binary. Each returns the text to
//! print and leaves argument parsing and the process exit to the caller.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::eval::{comparison_csv, comparison_text, evaluate, lateral_series_csv, match_series_csv, EvalReport};
use crate::format::write_atomic;
use crate::pipeline::{run_repeat, run_teach, RepeatError, Scenario};
use crate::repeat::{LogError, Mode, TraverseLog};
use crate::teach::{load_path, save_path, PathError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_HALTED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    MapRigMismatch(RepeatError),
    #[error(transparent)]
    VoFailure(crate::teach::TeachError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) | CliError::MapRigMismatch(_) => EXIT_INPUT,
            CliError::VoFailure(_) => EXIT_HALTED,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl From<LogError> for CliError {
    fn from(e: LogError) -> Self {
        CliError::Input(e.to_string())
    }
}

/// Output of a command that ran to completion.
#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub text: String,
    pub exit_code: i32,
}

impl CommandOutput {
    fn ok(text: String) -> Self {
        Self {
            text,
            exit_code: EXIT_OK,
        }
    }
}

/// Loads a config file (defaults when `path` is `None`) and applies a seed
/// override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            ConfigError::Io(io) => CliError::Input(format!("{}: {io}", p.display())),
            other => CliError::Config(other),
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn cmd_teach(config: &RunConfig, map_out: &Path) -> Result<CommandOutput, CliError> {
    let scenario = Scenario::new(config.clone())?;
    let run = run_teach(&scenario).map_err(CliError::VoFailure)?;
    run.path
        .validate()
        .map_err(|e| CliError::Internal(format!("taught path is inconsistent: {e}")))?;
    save_path(&run.path, map_out).map_err(|e| CliError::Input(format!("{}: {e}", map_out.display())))?;
    let mut text = String::new();
    if run.path.len() == 1 {
        let _ = writeln!(text, "warning: the drive produced a single keyframe");
    }
    let _ = writeln!(text, "frames      {}", run.frames);
    let _ = writeln!(text, "keyframes   {}", run.path.len());
    let _ = writeln!(text, "path length {:.2} m", run.path.length());
    let _ = writeln!(text, "map         {}", map_out.display());
    Ok(CommandOutput::ok(text))
}

pub fn cmd_repeat(config: &RunConfig, map: &Path, log_out: &Path) -> Result<CommandOutput, CliError> {
    let path = load_path(map).map_err(|e| match e {
        PathError::Format(f) => CliError::Input(format!("{}: {f}", map.display())),
        other => CliError::Input(format!("{}: {other}", map.display())),
    })?;
    let scenario = Scenario::new(config.clone())?;
    let run = run_repeat(&scenario, &path).map_err(|e| match e {
        RepeatError::MapRigMismatch { .. } => CliError::MapRigMismatch(e),
        RepeatError::Invalid(m) => CliError::Input(m),
    })?;
    run.log
        .validate()
        .map_err(|e| CliError::Internal(format!("traverse log is inconsistent: {e}")))?;
    run.log
        .save(log_out)
        .map_err(|e| CliError::Input(format!("{}: {e}", log_out.display())))?;
    let report = evaluate(&run.log);
    let mut text = String::new();
    let _ = writeln!(text, "autonomy    {:.2} %", report.autonomy);
    let _ = writeln!(text, "lateral rms {:.4} m", report.lateral_rms);
    let _ = writeln!(text, "lateral max {:.4} m", report.lateral_max);
    let _ = writeln!(text, "frames      {}", report.frames);
    let _ = writeln!(
        text,
        "outcome     {}",
        if run.reached_destination {
            "reached destination".to_string()
        } else {
            format!("stopped in {}", run.final_mode)
        }
    );
    let _ = writeln!(text, "log         {}", log_out.display());
    Ok(CommandOutput {
        text,
        exit_code: if run.final_mode == Mode::Halted { EXIT_HALTED } else { EXIT_OK },
    })
}

fn run_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Evaluates one or more logs. With several, a comparison table follows
/// the individual reports. The CSV is written to `out/eval.csv` when an
/// output directory is given.
pub fn cmd_eval(logs: &[PathBuf], out: Option<&Path>) -> Result<(Vec<(String, EvalReport)>, CommandOutput), CliError> {
    if logs.is_empty() {
        return Err(CliError::Input("no traverse logs given".into()));
    }
    let mut runs = Vec::new();
    for p in logs {
        let log = TraverseLog::load(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        runs.push((run_label(p), evaluate(&log)));
    }
    let mut text = String::new();
    for (name, r) in &runs {
        let _ = writeln!(text, "== {name}");
        text.push_str(&r.to_text());
    }
    if runs.len() > 1 {
        let _ = writeln!(text, "== comparison");
        text.push_str(&comparison_text(&runs));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        let file = dir.join("eval.csv");
        write_atomic(&file, &comparison_csv(&runs)).map_err(|e| CliError::Input(format!("{}: {e}", file.display())))?;
        let _ = writeln!(text, "csv         {}", file.display());
    }
    Ok((runs, CommandOutput::ok(text)))
}

pub const LATERAL_SERIES_FILE: &str = "lateral_error.csv";
pub const MATCH_SERIES_FILE: &str = "match_counts.csv";

pub fn cmd_export_plots(log: &Path, out: &Path, window: usize) -> Result<CommandOutput, CliError> {
    if window == 0 {
        return Err(CliError::Input("filter window must be positive".into()));
    }
    let traverse = TraverseLog::load(log).map_err(|e| CliError::Input(format!("{}: {e}", log.display())))?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
    let mut text = String::new();
    for (name, bytes) in [
        (LATERAL_SERIES_FILE, lateral_series_csv(&traverse, window)),
        (MATCH_SERIES_FILE, match_series_csv(&traverse, window)),
    ] {
        let file = out.join(name);
        write_atomic(&file, &bytes).map_err(|e| CliError::Input(format!("{}: {e}", file.display())))?;
        let _ = writeln!(text, "{}", file.display());
    }
    Ok(CommandOutput::ok(text))
}
