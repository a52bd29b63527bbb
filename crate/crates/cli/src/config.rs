//! Run configuration as read from JSON.

use std::path::{Path, PathBuf};

use etc_hinf::adversary::SampleSpec;
use etc_hinf::policies::{ControllerSpec, RowMatrix, SchedulerSpec};
use etc_hinf::riccati::RiccatiOptions;
use etc_hinf::{SystemModel, Vector};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_SIM_HORIZON: usize = 1000;
pub const DEFAULT_ADVERSARY_HORIZON: usize = 100_000;
pub const DEFAULT_H_MAX: usize = 5;

/// Plant matrices, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub a: RowMatrix,
    pub b: RowMatrix,
    pub q: RowMatrix,
    pub r: RowMatrix,
}

/// Disturbance fed to `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceSpec {
    /// `w0` at `t = 0`, zero afterwards. Without `w0` the disturbance is identically zero.
    #[default]
    Zero,
    /// The `w` columns of a trace CSV, relative to the config file.
    File { path: PathBuf },
    /// `w0`, then `L(Ax + Bu)` at the probing level, plus `eps · v` at transmissions.
    Probing {
        #[serde(default)]
        eps: f64,
    },
    /// The adversarial disturbance generator.
    Adversary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub tol_gamma: f64,
    pub tol_fixpoint: f64,
    pub grid_points: usize,
    pub bisect_tol: f64,
    pub rate_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let o = RiccatiOptions::default();
        Self {
            tol_gamma: o.tol_gamma,
            tol_fixpoint: o.tol_fixpoint,
            grid_points: 201,
            bisect_tol: 1e-6,
            rate_tol: 1e-3,
        }
    }
}

/// Scheduler families covered by `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepScheduler {
    /// One cell per entry of `h_list`.
    Periodic,
    /// One cell; the level is taken at the longest gap of the pattern.
    Pattern { bits: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub h_list: Vec<usize>,
    pub schedulers: Vec<SweepScheduler>,
    /// Each cell runs the game controller at `γ_h · (1 + gamma_margin)`.
    pub gamma_margin: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { h_list: Vec::new(), schedulers: Vec::new(), gamma_margin: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A5Spec {
    pub count: usize,
    pub radius: f64,
    pub pilot_horizon: usize,
    pub grid_points: usize,
}

impl Default for A5Spec {
    fn default() -> Self {
        let s = SampleSpec::default();
        Self { count: s.count, radius: s.radius, pilot_horizon: s.pilot_horizon, grid_points: s.grid_points }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    #[serde(default)]
    pub controller: Option<ControllerSpec>,
    #[serde(default)]
    pub scheduler: Option<SchedulerSpec>,
    #[serde(default)]
    pub disturbance: DisturbanceSpec,
    /// Attenuation level under test.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Probing level used in place of `gamma` for the probing disturbance and the uniform-margin check.
    #[serde(default)]
    pub gamma_tilde: Option<f64>,
    #[serde(default)]
    pub h: Option<usize>,
    #[serde(default)]
    pub w0: Option<Vec<f64>>,
    #[serde(default)]
    pub eps_bar: Option<f64>,
    #[serde(default)]
    pub eps_low: Option<f64>,
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub h_max: Option<usize>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub a5: A5Spec,
    /// Output directory, relative to the config file. `--out` takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_square(name: &str, m: &RowMatrix, n: usize) -> Result<(), CliError> {
    if m.len() != n || m.iter().any(|r| r.len() != n) {
        return Err(config_err(format!("{name} must be {n}x{n}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Shape checks that do not need any numerics.
    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.system;
        let n = s.a.len();
        if n == 0 {
            return Err(config_err("system.a is empty"));
        }
        check_square("system.a", &s.a, n)?;
        check_square("system.q", &s.q, n)?;
        if s.b.len() != n {
            return Err(config_err(format!("system.b must have {n} rows")));
        }
        let m = s.b[0].len();
        if m == 0 || s.b.iter().any(|r| r.len() != m) {
            return Err(config_err("system.b rows must have equal nonzero length"));
        }
        check_square("system.r", &s.r, m)?;
        if let Some(w0) = &self.w0 {
            if w0.len() != n {
                return Err(config_err(format!("w0 has length {}, expected {n}", w0.len())));
            }
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("gamma_tilde", self.gamma_tilde),
            ("eps_bar", self.eps_bar),
            ("eps_low", self.eps_low),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(config_err(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if self.h == Some(0) || self.horizon == Some(0) || self.h_max == Some(0) {
            return Err(config_err("h, horizon and h_max must be at least 1"));
        }
        if self.sweep.h_list.contains(&0) {
            return Err(config_err("sweep.h_list entries must be at least 1"));
        }
        Ok(())
    }

    pub fn system(&self) -> Result<SystemModel, CliError> {
        let s = &self.system;
        SystemModel::from_rows(&s.a, &s.b, &s.q, &s.r).map_err(CliError::from_model)
    }

    pub fn options(&self) -> RiccatiOptions {
        RiccatiOptions {
            tol_gamma: self.tolerances.tol_gamma,
            tol_fixpoint: self.tolerances.tol_fixpoint,
            ..RiccatiOptions::default()
        }
    }

    pub fn controller(&self) -> Result<&ControllerSpec, CliError> {
        self.controller.as_ref().ok_or_else(|| config_err("config needs a controller"))
    }

    pub fn scheduler(&self) -> Result<&SchedulerSpec, CliError> {
        self.scheduler.as_ref().ok_or_else(|| config_err("config needs a scheduler"))
    }

    pub fn gamma(&self) -> Result<f64, CliError> {
        self.gamma.ok_or_else(|| config_err("config needs gamma"))
    }

    /// `gamma_tilde` when given, else `gamma`.
    pub fn probing_gamma(&self) -> Result<f64, CliError> {
        self.gamma_tilde.map_or_else(|| self.gamma(), Ok)
    }

    pub fn h(&self) -> Result<usize, CliError> {
        self.h.ok_or_else(|| config_err("config needs h"))
    }

    pub fn w0(&self) -> Result<Vector, CliError> {
        self.w0.as_ref().map(|w| Vector::from_vec(w.clone())).ok_or_else(|| config_err("config needs w0"))
    }

    pub fn eps(&self) -> Result<(f64, f64), CliError> {
        match (self.eps_bar, self.eps_low) {
            (Some(bar), Some(low)) => Ok((bar, low)),
            _ => Err(config_err("config needs eps_bar and eps_low")),
        }
    }

    pub fn sample_spec(&self, seed: u64) -> SampleSpec {
        SampleSpec {
            count: self.a5.count,
            radius: self.a5.radius,
            pilot_horizon: self.a5.pilot_horizon,
            grid_points: self.a5.grid_points,
            seed,
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}
