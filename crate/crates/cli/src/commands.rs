//! The five experiment commands, as library functions.

use std::path::Path;

use etc_hinf::adversary::{
    check_assumption5, run_adversary, A5Report, AdversaryConfig, AdversaryVerdict, EpsEvent, Outcome, TerminalInfo,
};
use etc_hinf::policies::{pattern_max_gap, ControllerSpec, PolicyPair, SchedulerSpec};
use etc_hinf::riccati::{gamma_h, GameGains, RiccatiBundle};
use etc_hinf::sim::{
    fmt_f64, read_trace_csv, run_closed_loop, trace_metrics, EtaSpec, Metrics, ProbingSource, SequenceSource, Trace,
    ZeroSource,
};
use etc_hinf::{SystemModel, Vector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DisturbanceSpec, RunConfig, SweepScheduler, DEFAULT_ADVERSARY_HORIZON, DEFAULT_SIM_HORIZON};
use crate::CliError;

/// `(h, γ_h)` for `h = 1..=h_max`.
pub fn gamma_table(cfg: &RunConfig, h_max: usize) -> Result<Vec<(usize, f64)>, CliError> {
    let sys = cfg.system()?;
    let opts = cfg.options();
    (1..=h_max).map(|h| Ok((h, gamma_h(&sys, h, &opts)?))).collect()
}

pub fn gamma_table_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("h,gamma_h\n");
    for (h, g) in rows {
        s.push_str(&format!("{h},{}\n", fmt_f64(*g)));
    }
    s
}

pub struct SimOutput {
    pub trace: Trace,
    pub metrics: Metrics,
    pub warnings: Vec<String>,
}

fn build_pair(cfg: &RunConfig, sys: &SystemModel) -> Result<PolicyPair, CliError> {
    Ok(PolicyPair::new(sys, cfg.controller()?, cfg.scheduler()?, &cfg.options())?)
}

/// Runs the closed loop with the configured disturbance.
pub fn simulate(cfg: &RunConfig) -> Result<SimOutput, CliError> {
    let sys = cfg.system()?;
    let opts = cfg.options();
    let mut pair = build_pair(cfg, &sys)?;
    let warnings = pair.warnings().to_vec();
    let horizon = cfg.horizon.unwrap_or(DEFAULT_SIM_HORIZON);
    let eta = match cfg.gamma {
        Some(g) => Some(EtaSpec { gamma: g, pbar: GameGains::new(&sys, g, &opts)?.pbar }),
        None => None,
    };
    let trace = match &cfg.disturbance {
        DisturbanceSpec::Zero => {
            let w0 = cfg.w0.as_ref().map(|w| Vector::from_vec(w.clone()));
            run_closed_loop(&sys, &mut pair, &mut ZeroSource { w0 }, horizon, eta.as_ref())?
        }
        DisturbanceSpec::File { path } => {
            let path = cfg.resolve(path);
            let file = std::fs::File::open(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let recorded = read_trace_csv(&sys, std::io::BufReader::new(file))?;
            let horizon = cfg.horizon.unwrap_or(recorded.len());
            let ws = recorded.rows.into_iter().map(|r| r.w).collect();
            run_closed_loop(&sys, &mut pair, &mut SequenceSource { ws }, horizon, eta.as_ref())?
        }
        DisturbanceSpec::Probing { eps } => {
            let gp = cfg.probing_gamma()?;
            let l = GameGains::new(&sys, gp, &opts)?.l;
            let direction = if *eps != 0.0 { Some(RiccatiBundle::new(&sys, gp, cfg.h()?, &opts)?.v_dir) } else { None };
            let mut src = ProbingSource { l, w0: cfg.w0()?, direction, eps: *eps };
            run_closed_loop(&sys, &mut pair, &mut src, horizon, eta.as_ref())?
        }
        DisturbanceSpec::Adversary => run_adversary(&sys, &mut pair, &adversary_config(cfg, &sys)?)?.trace,
    };
    let metrics = trace_metrics(&trace)?;
    Ok(SimOutput { trace, metrics, warnings })
}

pub fn adversary_config(cfg: &RunConfig, sys: &SystemModel) -> Result<AdversaryConfig, CliError> {
    let (eps_bar, eps_low) = cfg.eps()?;
    let mut ac = AdversaryConfig::new(sys, cfg.gamma()?, cfg.h()?, cfg.w0()?, eps_bar, eps_low, &cfg.options())?;
    ac.horizon_cap = cfg.horizon.unwrap_or(DEFAULT_ADVERSARY_HORIZON);
    ac.grid_points = cfg.tolerances.grid_points;
    ac.bisect_tol = cfg.tolerances.bisect_tol;
    ac.rate_tol = cfg.tolerances.rate_tol;
    Ok(ac)
}

pub fn adversary(cfg: &RunConfig) -> Result<AdversaryVerdict, CliError> {
    let sys = cfg.system()?;
    let mut pair = build_pair(cfg, &sys)?;
    for w in pair.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(run_adversary(&sys, &mut pair, &adversary_config(cfg, &sys)?)?)
}

/// Contents of `verdict.json`.
#[derive(Debug, Clone, Serialize)]
pub struct VerdictReport {
    pub outcome: &'static str,
    pub ratio: f64,
    pub rate: f64,
    pub tail_rate: f64,
    pub game_sum: f64,
    pub eta_final: f64,
    pub probe_failures: usize,
    pub delta_bound: u64,
    pub trace_csv: String,
    pub detail: Outcome,
    pub terminal: Option<TerminalInfo>,
    pub eps_events: Vec<EpsEvent>,
}

impl VerdictReport {
    pub fn new(v: &AdversaryVerdict, trace_csv: &Path) -> Self {
        Self {
            outcome: v.outcome.name(),
            ratio: v.ratio,
            rate: v.rate,
            tail_rate: v.tail_rate,
            game_sum: v.game_sum,
            eta_final: v.eta_final,
            probe_failures: v.probe_failures,
            delta_bound: v.delta_bound,
            trace_csv: trace_csv.display().to_string(),
            detail: v.outcome.clone(),
            terminal: v.terminal.clone(),
            eps_events: v.eps_events.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub scheduler: String,
    /// Period, or the longest gap of a pattern.
    pub h: usize,
    pub rate: f64,
    pub ratio: f64,
    pub gamma_h: f64,
}

struct Cell {
    label: String,
    spec: SchedulerSpec,
    gap: usize,
    period: usize,
}

/// One row per (scheduler, h) cell. Each cell runs the game controller at
/// `γ_gap · (1 + gamma_margin)` against the pure worst-case disturbance at
/// the same level. The rate is measured over whole schedule periods in the
/// second half of the run.
pub fn sweep(cfg: &RunConfig, threads: Option<usize>) -> Result<Vec<SweepRow>, CliError> {
    let sys = cfg.system()?;
    let opts = cfg.options();
    let mut cells = Vec::new();
    for s in &cfg.sweep.schedulers {
        match s {
            SweepScheduler::Periodic => {
                for &h in &cfg.sweep.h_list {
                    cells.push(Cell {
                        label: "periodic".into(),
                        spec: SchedulerSpec::Periodic { h },
                        gap: h,
                        period: h,
                    });
                }
            }
            SweepScheduler::Pattern { bits } => cells.push(Cell {
                label: format!("pattern:{bits}"),
                spec: SchedulerSpec::Pattern { bits: bits.clone() },
                gap: pattern_max_gap(bits)?,
                period: bits.len(),
            }),
        }
    }
    if cells.is_empty() {
        return Ok(Vec::new());
    }
    let horizon = cfg.horizon.unwrap_or(DEFAULT_SIM_HORIZON);
    let w0 = cfg.w0.as_ref().map_or_else(|| Vector::from_element(sys.n(), 1.0), |w| Vector::from_vec(w.clone()));
    let margin = cfg.sweep.gamma_margin;
    let run_cell = |c: &Cell| -> Result<SweepRow, CliError> {
        let level = gamma_h(&sys, c.gap, &opts)?;
        let g = level * (1.0 + margin);
        let gains = GameGains::new(&sys, g, &opts)?;
        let mut pair = PolicyPair::new(&sys, &ControllerSpec::GamePredictive { gamma_bar: g }, &c.spec, &opts)?;
        let mut src = ProbingSource { l: gains.l.clone(), w0: w0.clone(), direction: None, eps: 0.0 };
        let trace = run_closed_loop(&sys, &mut pair, &mut src, horizon, None)?;
        let metrics = trace_metrics(&trace)?;
        let cycles = (trace.len() / c.period / 2).max(1);
        let window = &trace.rows[trace.len().saturating_sub(cycles * c.period)..];
        let rate = window.iter().filter(|r| r.sigma).count() as f64 / window.len() as f64;
        Ok(SweepRow { scheduler: c.label.clone(), h: c.gap, rate, ratio: metrics.ratio, gamma_h: level })
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(run_cell).collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("scheduler,h,rate,ratio,gamma_h\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scheduler,
            r.h,
            fmt_f64(r.rate),
            fmt_f64(r.ratio),
            fmt_f64(r.gamma_h)
        ));
    }
    s
}

/// Uniform kick-margin check at the probing level.
pub fn check_a5(cfg: &RunConfig, seed: u64) -> Result<A5Report, CliError> {
    let sys = cfg.system()?;
    let opts = cfg.options();
    let mut pair = build_pair(cfg, &sys)?;
    let bundle = RiccatiBundle::new(&sys, cfg.probing_gamma()?, cfg.h()?, &opts)?;
    let (_, eps_low) = cfg.eps()?;
    Ok(check_assumption5(&sys, &mut pair, &bundle, &cfg.w0()?, eps_low, &cfg.sample_spec(seed))?)
}
