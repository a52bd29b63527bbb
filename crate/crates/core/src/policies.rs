//! Controller/scheduler pairs with snapshot and restore.
//!
//! A pair sees the measured state once per step, decides whether the state is
//! transmitted and returns the control input. Between transmissions the
//! controller propagates its own estimate of the state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{from_rows, min_eig, quad, spectral_radius, Mat, Vector};
use crate::model::SystemModel;
use crate::riccati::{GameGains, RiccatiBundle, RiccatiOptions};

/// Row-major matrix as it appears in configuration files.
pub type RowMatrix = Vec<Vec<f64>>;

pub const DEFAULT_TOL_MATCH: f64 = 1e-9;

fn default_tol_match() -> f64 {
    DEFAULT_TOL_MATCH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    /// `u = K x̂` with `x̂⁺ = (A + BK) x̂` between transmissions. The gain is
    /// given either explicitly or as the game gain at `gamma`.
    Hold {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<RowMatrix>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
    },
    /// `u = K_γ̄ x̂` with `x̂⁺ = (I + L_γ̄)(A + BK_γ̄) x̂` between transmissions.
    GamePredictive { gamma_bar: f64 },
}

/// How the disturbance-deviation term enters the game trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `+ dᵀ(γ̄²I − P̄)d`
    #[default]
    Direct,
    /// `− dᵀ(γ̄²I − P̄)⁻¹d`
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulerSpec {
    /// Transmit when `t mod h = 0`.
    Periodic { h: usize },
    /// Transmit when `bits[t mod len] = 1`.
    Pattern { bits: String },
    /// Transmit when `eᵀXe > rho` with `e` the prediction error.
    Threshold { x: RowMatrix, rho: f64, hbar: usize },
    /// Transmit when the accumulated game cost since the last transmission is positive.
    GameTrigger {
        gamma_bar: f64,
        hbar: usize,
        #[serde(default)]
        weight: WeightMode,
    },
    /// Suppresses `inner` while the disturbances since the last transmission
    /// look like a probing kick of size at most `eps_low` along the worst
    /// direction for `(gamma, h)`.
    DeadbandWrapped {
        inner: Box<SchedulerSpec>,
        gamma: f64,
        h: usize,
        eps_low: f64,
        #[serde(default = "default_tol_match")]
        tol_match: f64,
    },
}

/// Output of one pair step.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub sigma: bool,
    pub u: Vector,
}

/// Interface the simulator and the adversary need from a pair.
pub trait SnapshotPair {
    type Snapshot: Clone;

    /// `(n, m)`
    fn dims(&self) -> (usize, usize);
    /// Longest allowed gap between transmissions.
    fn hbar(&self) -> usize;
    /// Index of the next step.
    fn time(&self) -> usize;
    fn step(&mut self, x: &Vector) -> Result<Decision>;
    /// Like `step`, but the state is transmitted regardless of the scheduler.
    fn step_forced(&mut self, x: &Vector) -> Result<Decision>;
    fn snapshot(&self) -> Result<Self::Snapshot>;
    fn restore(&mut self, snap: &Self::Snapshot) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
struct Controller {
    k: Mat,
    phi: Mat,
}

#[derive(Debug, Clone, PartialEq)]
enum Scheduler {
    Periodic(usize),
    Pattern(Vec<bool>),
    Threshold { x: Mat, rho: f64 },
    GameTrigger { gains: Box<GameGains>, mode: WeightMode },
    Deadband { inner: Box<Scheduler>, l: Mat, v: Vector, eps_low: f64, tol: f64 },
}

/// Mutable part of a pair. Windows start at the last transmission.
#[derive(Debug, Clone, PartialEq)]
struct PairState {
    t: usize,
    last: Option<usize>,
    xhat: Vector,
    /// `x_s ..= x_{t−1}`
    xs: Vec<Vector>,
    /// `u_s ..= u_{t−1}`
    us: Vec<Vector>,
    /// `x̂_s ..= x̂_{t−1}`
    preds: Vec<Vector>,
}

/// Opaque copy of a pair's state, tagged with the pair's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    signature: String,
    state: PairState,
}

/// Scheduler inputs at time `t`.
pub struct Window<'a> {
    pub t: usize,
    /// `x_s ..= x_{t−1}`
    pub xs: &'a [Vector],
    /// `u_s ..= u_{t−1}`
    pub us: &'a [Vector],
    /// `x̂_s ..= x̂_{t−1}`
    pub preds: &'a [Vector],
    pub x: &'a Vector,
    /// Controller's prediction of `x_t`.
    pub pred: &'a Vector,
}

/// A controller and a scheduler sharing the transmission history.
#[derive(Debug, Clone)]
pub struct PolicyPair {
    sys: SystemModel,
    controller: Controller,
    scheduler: Scheduler,
    hbar: usize,
    signature: String,
    warnings: Vec<String>,
    state: PairState,
}

impl PolicyPair {
    pub fn new(
        sys: &SystemModel,
        controller: &ControllerSpec,
        scheduler: &SchedulerSpec,
        opts: &RiccatiOptions,
    ) -> Result<Self> {
        let mut warnings = Vec::new();
        let ctrl = compile_controller(sys, controller, opts, &mut warnings)?;
        let sched = compile_scheduler(sys, scheduler, opts)?;
        let hbar = scheduler_hbar(scheduler)?;
        let signature = format!("n={} m={} {controller:?} {scheduler:?}", sys.n(), sys.m());
        let state = PairState {
            t: 0,
            last: None,
            xhat: Vector::zeros(sys.n()),
            xs: Vec::new(),
            us: Vec::new(),
            preds: Vec::new(),
        };
        Ok(Self { sys: sys.clone(), controller: ctrl, scheduler: sched, hbar, signature, warnings, state })
    }

    /// Non-fatal issues found while compiling the specs.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn gain(&self) -> &Mat {
        &self.controller.k
    }

    /// Matrix propagating the controller's estimate between transmissions.
    pub fn predictor(&self) -> &Mat {
        &self.controller.phi
    }

    pub fn last_transmission(&self) -> Option<usize> {
        self.state.last
    }

    fn advance(&mut self, x: &Vector, force: bool) -> Result<Decision> {
        let n = self.sys.n();
        if x.len() != n {
            return Err(Error::PolicyDimensionMismatch(format!("state has length {}, expected {n}", x.len())));
        }
        let t = self.state.t;
        let pred = if t == 0 { Vector::zeros(n) } else { &self.controller.phi * &self.state.xhat };
        let sigma = if force {
            true
        } else if t == 0 {
            false
        } else {
            match self.state.last {
                None => true,
                Some(_) if t == 1 => true,
                Some(last) if t - last >= self.hbar => true,
                Some(_) => {
                    let st = &self.state;
                    let window = Window { t, xs: &st.xs, us: &st.us, preds: &st.preds, x, pred: &pred };
                    decide(&self.sys, &self.scheduler, &window)?
                }
            }
        };
        let st = &mut self.state;
        if sigma {
            st.xhat = x.clone();
            st.last = Some(t);
            st.xs.clear();
            st.us.clear();
            st.preds.clear();
        } else {
            st.xhat = pred;
        }
        st.xs.push(x.clone());
        st.preds.push(st.xhat.clone());
        let u = &self.controller.k * &st.xhat;
        st.us.push(u.clone());
        st.t += 1;
        Ok(Decision { sigma, u })
    }
}

impl SnapshotPair for PolicyPair {
    type Snapshot = PolicySnapshot;

    fn dims(&self) -> (usize, usize) {
        (self.sys.n(), self.sys.m())
    }

    fn hbar(&self) -> usize {
        self.hbar
    }

    fn time(&self) -> usize {
        self.state.t
    }

    fn step(&mut self, x: &Vector) -> Result<Decision> {
        self.advance(x, false)
    }

    fn step_forced(&mut self, x: &Vector) -> Result<Decision> {
        self.advance(x, true)
    }

    fn snapshot(&self) -> Result<PolicySnapshot> {
        Ok(PolicySnapshot { signature: self.signature.clone(), state: self.state.clone() })
    }

    fn restore(&mut self, snap: &PolicySnapshot) -> Result<()> {
        if snap.signature != self.signature {
            return Err(Error::VersionMismatch);
        }
        self.state = snap.state.clone();
        Ok(())
    }
}

fn compile_controller(
    sys: &SystemModel,
    spec: &ControllerSpec,
    opts: &RiccatiOptions,
    warnings: &mut Vec<String>,
) -> Result<Controller> {
    let (n, m) = (sys.n(), sys.m());
    match spec {
        ControllerSpec::Hold { k, gamma } => {
            let k = match (k, gamma) {
                (Some(rows), None) => from_rows(rows)?,
                (None, Some(g)) => GameGains::new(sys, *g, opts)?.k,
                _ => return Err(Error::InvalidArgument("hold controller needs exactly one of `k` and `gamma`".into())),
            };
            if k.shape() != (m, n) {
                return Err(Error::PolicyDimensionMismatch(format!("K is {:?}, expected ({m}, {n})", k.shape())));
            }
            let phi = sys.a() + sys.b() * &k;
            let rho = spectral_radius(&phi);
            if rho >= 1.0 {
                warnings.push(format!("A + BK is not Schur (spectral radius {rho:.6})"));
            }
            Ok(Controller { k, phi })
        }
        ControllerSpec::GamePredictive { gamma_bar } => {
            let gains = GameGains::new(sys, *gamma_bar, opts)?;
            let phi = gains.predictor(sys);
            Ok(Controller { k: gains.k, phi })
        }
    }
}

fn compile_scheduler(sys: &SystemModel, spec: &SchedulerSpec, opts: &RiccatiOptions) -> Result<Scheduler> {
    let n = sys.n();
    match spec {
        SchedulerSpec::Periodic { h } => {
            if *h == 0 {
                return Err(Error::InvalidArgument("periodic scheduler needs h >= 1".into()));
            }
            Ok(Scheduler::Periodic(*h))
        }
        SchedulerSpec::Pattern { bits } => Ok(Scheduler::Pattern(parse_bits(bits)?)),
        SchedulerSpec::Threshold { x, rho, hbar } => {
            let x = from_rows(x)?;
            if x.shape() != (n, n) {
                return Err(Error::PolicyDimensionMismatch(format!("X is {:?}, expected ({n}, {n})", x.shape())));
            }
            if min_eig(&x) < -1e-9 {
                return Err(Error::InvalidArgument("threshold weight X must be positive semidefinite".into()));
            }
            if !(*rho > 0.0) || *hbar == 0 {
                return Err(Error::InvalidArgument("threshold scheduler needs rho > 0 and hbar >= 1".into()));
            }
            Ok(Scheduler::Threshold { x, rho: *rho })
        }
        SchedulerSpec::GameTrigger { gamma_bar, hbar, weight } => {
            if *hbar == 0 {
                return Err(Error::InvalidArgument("game trigger needs hbar >= 1".into()));
            }
            let gains = GameGains::new(sys, *gamma_bar, opts)
                .map_err(|e| Error::GainUnavailable(format!("game trigger at gamma = {gamma_bar}: {e}")))?;
            Ok(Scheduler::GameTrigger { gains: Box::new(gains), mode: *weight })
        }
        SchedulerSpec::DeadbandWrapped { inner, gamma, h, eps_low, tol_match } => {
            if !(*eps_low > 0.0) || !(*tol_match >= 0.0) {
                return Err(Error::InvalidArgument("deadband needs eps_low > 0 and tol_match >= 0".into()));
            }
            let bundle = RiccatiBundle::new(sys, *gamma, *h, opts)?;
            Ok(Scheduler::Deadband {
                inner: Box::new(compile_scheduler(sys, inner, opts)?),
                l: bundle.gains.l,
                v: bundle.v_dir,
                eps_low: *eps_low,
                tol: *tol_match,
            })
        }
    }
}

fn parse_bits(bits: &str) -> Result<Vec<bool>> {
    let parsed: Vec<bool> = bits
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::InvalidArgument(format!("pattern contains {other:?}"))),
        })
        .collect::<Result<_>>()?;
    if !parsed.contains(&true) {
        return Err(Error::InvalidArgument("pattern needs at least one 1".into()));
    }
    Ok(parsed)
}

/// Longest cyclic gap between consecutive ones of a pattern.
pub fn pattern_max_gap(bits: &str) -> Result<usize> {
    let parsed = parse_bits(bits)?;
    let len = parsed.len();
    let ones: Vec<usize> = (0..len).filter(|&i| parsed[i]).collect();
    Ok((0..ones.len())
        .map(|i| {
            let next = if i + 1 < ones.len() { ones[i + 1] } else { ones[0] + len };
            next - ones[i]
        })
        .max()
        .unwrap_or(len))
}

fn scheduler_hbar(spec: &SchedulerSpec) -> Result<usize> {
    Ok(match spec {
        SchedulerSpec::Periodic { h } => *h,
        SchedulerSpec::Pattern { bits } => pattern_max_gap(bits)?,
        SchedulerSpec::Threshold { hbar, .. } | SchedulerSpec::GameTrigger { hbar, .. } => *hbar,
        SchedulerSpec::DeadbandWrapped { inner, .. } => scheduler_hbar(inner)?,
    })
}

fn decide(sys: &SystemModel, sched: &Scheduler, w: &Window<'_>) -> Result<bool> {
    Ok(match sched {
        Scheduler::Periodic(h) => w.t.is_multiple_of(*h),
        Scheduler::Pattern(bits) => bits[w.t % bits.len()],
        Scheduler::Threshold { x, rho } => quad(&(w.x - w.pred), x) > *rho,
        Scheduler::GameTrigger { gains, mode } => {
            let (xs, preds) = extended(w);
            let g = g_value(sys, gains, *mode, &xs, w.us, &preds)?;
            let scale: f64 = w.xs.iter().map(|x| x.norm_squared()).sum();
            g > 1e-12 * scale
        }
        Scheduler::Deadband { inner, l, v, eps_low, tol } => {
            let (xs, _) = extended(w);
            if matches_probing(sys, l, v, *eps_low, *tol, &xs, w.us) {
                false
            } else {
                decide(sys, inner, w)?
            }
        }
    })
}

fn extended(w: &Window<'_>) -> (Vec<Vector>, Vec<Vector>) {
    let mut xs = w.xs.to_vec();
    xs.push(w.x.clone());
    let mut preds = w.preds.to_vec();
    preds.push(w.pred.clone());
    (xs, preds)
}

/// `w_k = x_{k+1} − Ax_k − Bu_k`
pub fn reconstruct_disturbance(sys: &SystemModel, x: &Vector, u: &Vector, x_next: &Vector) -> Vector {
    x_next - sys.drift(x, u)
}

/// Accumulated game cost over the window since the last transmission.
///
/// `xs` holds `x_s ..= x_t`, `us` holds `u_s ..= u_{t−1}` and `preds` the
/// controller's estimates `x̂_s ..= x̂_t`. Each step contributes
/// `m_kᵀ R̃ m_k` with `m_k = K_γ̄(x_{k+1} − x̂_{k+1})`, plus or minus a
/// quadratic in the disturbance deviation `d_k = w_k − L_γ̄(Ax_k + Bu_k)`
/// depending on `mode`.
pub fn g_value(
    sys: &SystemModel,
    gains: &GameGains,
    mode: WeightMode,
    xs: &[Vector],
    us: &[Vector],
    preds: &[Vector],
) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::InsufficientHistory);
    }
    if us.len() + 1 != xs.len() || preds.len() != xs.len() {
        return Err(Error::PolicyDimensionMismatch("G window lengths disagree".into()));
    }
    let gap = Mat::identity(sys.n(), sys.n()) * gains.gamma.powi(2) - &gains.pbar;
    let gap_inv = match mode {
        WeightMode::Direct => None,
        WeightMode::Inverse => {
            Some(gap.clone().try_inverse().ok_or_else(|| Error::NumericalFailure("gamma^2 I - P is singular".into()))?)
        }
    };
    let mut g = 0.0;
    for k in 0..us.len() {
        let drift = sys.drift(&xs[k], &us[k]);
        let d = &xs[k + 1] - &drift - &gains.l * &drift;
        let m = &gains.k * (&xs[k + 1] - &preds[k + 1]);
        g += quad(&m, &gains.r_tilde);
        g += match &gap_inv {
            None => quad(&d, &gap),
            Some(inv) => -quad(&d, inv),
        };
    }
    Ok(g)
}

/// True when the disturbances over the window are the worst-case response
/// plus a kick `εv` at the first step only, with `|ε| ≤ eps_low`.
pub fn matches_probing(
    sys: &SystemModel,
    l: &Mat,
    v: &Vector,
    eps_low: f64,
    tol: f64,
    xs: &[Vector],
    us: &[Vector],
) -> bool {
    for k in 0..us.len().min(xs.len().saturating_sub(1)) {
        let drift = sys.drift(&xs[k], &us[k]);
        let d = &xs[k + 1] - &drift - l * &drift;
        if k == 0 {
            let eps = v.dot(&d);
            if (&d - v * eps).norm() > tol || eps.abs() > eps_low + tol {
                return false;
            }
        } else if d.norm() > tol {
            return false;
        }
    }
    true
}
