//! Experiment driver behind the `etc-hinf` binary.
//!
//! Each command reads a [`RunConfig`], runs one experiment and writes its
//! artifacts (`gamma_table.csv`, `trace.csv`, `metrics.json`, `verdict.json`,
//! `sweep.csv`, `a5_report.json`) into the output directory.

pub mod commands;
pub mod config;

use std::path::PathBuf;

pub use commands::*;
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] etc_hinf::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical failures, 4 when a
    /// standing assumption is violated.
    pub fn exit_code(&self) -> i32 {
        use etc_hinf::Error as E;
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                E::AssumptionFourViolated { .. } | E::AssumptionFiveViolatedAt { .. } | E::EmptySet { .. } => 4,
                E::Dimension(_)
                | E::InvalidModel(_)
                | E::InvalidArgument(_)
                | E::PolicyDimensionMismatch(_)
                | E::HorizonTooSmall => 2,
                _ => 3,
            },
        }
    }

    pub(crate) fn from_model(e: etc_hinf::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GammaTable,
    Simulate,
    Adversary,
    Sweep,
    CheckA5,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub command: Command,
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub h_max: Option<usize>,
    pub seed: Option<u64>,
}

/// Runs one command and returns the text meant for stdout.
pub fn run(inv: &Invocation) -> Result<String, CliError> {
    let cfg = RunConfig::load(&inv.config)?;
    let out = match (&inv.out, &cfg.out_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(d)) => cfg.resolve(d),
        (None, None) => PathBuf::from("."),
    };
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let seed = inv.seed.unwrap_or(cfg.seed);
    match inv.command {
        Command::GammaTable => {
            let h_max = inv.h_max.or(cfg.h_max).unwrap_or(config::DEFAULT_H_MAX);
            let csv = gamma_table_csv(&gamma_table(&cfg, h_max)?);
            write_file(&out.join("gamma_table.csv"), &csv)?;
            Ok(csv)
        }
        Command::Simulate => {
            let sim = simulate(&cfg)?;
            for w in &sim.warnings {
                eprintln!("warning: {w}");
            }
            write_trace(&out.join("trace.csv"), &sim.trace)?;
            let json = to_json(&sim.metrics)?;
            write_file(&out.join("metrics.json"), &json)?;
            Ok(json)
        }
        Command::Adversary => {
            let verdict = adversary(&cfg)?;
            let trace_path = out.join("trace.csv");
            write_trace(&trace_path, &verdict.trace)?;
            let json = to_json(&VerdictReport::new(&verdict, &trace_path))?;
            write_file(&out.join("verdict.json"), &json)?;
            Ok(json)
        }
        Command::Sweep => {
            let csv = sweep_csv(&sweep(&cfg, thread_cap())?);
            write_file(&out.join("sweep.csv"), &csv)?;
            Ok(csv)
        }
        Command::CheckA5 => {
            let json = to_json(&check_a5(&cfg, seed)?)?;
            write_file(&out.join("a5_report.json"), &json)?;
            Ok(json)
        }
    }
}

/// Parallelism cap for `sweep` from `ETC_HINF_THREADS`.
pub fn thread_cap() -> Option<usize> {
    std::env::var("ETC_HINF_THREADS").ok()?.trim().parse().ok().filter(|n| *n > 0)
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn write_file(path: &std::path::Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_trace(path: &std::path::Path, trace: &etc_hinf::sim::Trace) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    etc_hinf::sim::write_trace_csv(trace, std::io::BufWriter::new(file))?;
    Ok(())
}
