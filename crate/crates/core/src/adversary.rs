//! Adversarial disturbance generator.
//!
//! Against a known controller/scheduler pair the generator either pushes the
//! loop past the attenuation level γ or forces it to transmit at least once
//! every `h` steps on average. It probes the pair counterfactually through
//! snapshot and restore, so the real loop is never perturbed by the probing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{quad, Mat, Vector};
use crate::model::SystemModel;
use crate::policies::SnapshotPair;
use crate::riccati::{RiccatiBundle, RiccatiOptions, ZetaLadder};
use crate::sim::{self, run_closed_loop, stage_cost, DisturbanceSource, EtaSpec, StepContext, Trace};

#[derive(Debug, Clone)]
pub struct AdversaryConfig {
    pub gamma: f64,
    pub h: usize,
    pub w0: Vector,
    pub eps_bar: f64,
    pub eps_low: f64,
    pub horizon_cap: usize,
    pub grid_points: usize,
    /// Width at which the ε-set boundaries stop being refined.
    pub bisect_tol: f64,
    pub rate_tol: f64,
    pub q_max: usize,
    /// `|b| ≤ b_tie_rel · (|a| + |c|)` counts as `b = 0`.
    pub b_tie_rel: f64,
    pub bundle: RiccatiBundle,
}

impl AdversaryConfig {
    /// Builds the (γ, h) bundle, which fails unless γ lies strictly between
    /// the periodic levels for `h` and `h + 1`.
    pub fn new(
        sys: &SystemModel,
        gamma: f64,
        h: usize,
        w0: Vector,
        eps_bar: f64,
        eps_low: f64,
        opts: &RiccatiOptions,
    ) -> Result<Self> {
        if w0.len() != sys.n() {
            return Err(Error::Dimension(format!("w0 has length {}, expected {}", w0.len(), sys.n())));
        }
        if w0.norm() == 0.0 {
            return Err(Error::InvalidArgument("w0 must be nonzero".into()));
        }
        if !(eps_low > 0.0 && eps_bar >= eps_low) {
            return Err(Error::InvalidArgument(format!(
                "need eps_bar >= eps_low > 0, got eps_bar = {eps_bar}, eps_low = {eps_low}"
            )));
        }
        let bundle = RiccatiBundle::new(sys, gamma, h, opts)?;
        Ok(Self {
            gamma,
            h,
            w0,
            eps_bar,
            eps_low,
            horizon_cap: 100_000,
            grid_points: 201,
            bisect_tol: 1e-6,
            rate_tol: 1e-3,
            q_max: 10_000,
            b_tie_rel: 1e-9,
            bundle,
        })
    }

    /// Guaranteed gain in the game sum from one ε-step with `|ε| ≥ eps_low`,
    /// using the curvature `−vᵀ(γ²I − M_{h+1})v`.
    pub fn alpha(&self) -> f64 {
        -self.bundle.lambda_min * self.eps_low * self.eps_low
    }

    /// Upper bound on the number of ε-steps before η turns positive:
    /// `⌈w₀ᵀ(γ²I − P̄)w₀ / α⌉`.
    pub fn delta_bound(&self) -> u64 {
        (quad(&self.w0, &self.bundle.gap()) / self.alpha()).ceil().max(0.0) as u64
    }
}

/// Steps until the next transmission when the pair has just transmitted
/// `x` at the current time and applied `u`, under the probing disturbance
/// `w = L(Ax + Bu) + εv` at the first step and `w = L(Ax + Bu)` afterwards.
///
/// The pair is restored before returning.
pub fn probe_from_transmission<P: SnapshotPair>(
    sys: &SystemModel,
    pair: &mut P,
    bundle: &RiccatiBundle,
    x: &Vector,
    u: &Vector,
    eps: f64,
) -> Result<usize> {
    let snap = pair.snapshot()?;
    let result = probe_inner(sys, pair, bundle, x, u, eps);
    pair.restore(&snap)?;
    result
}

fn probe_inner<P: SnapshotPair>(
    sys: &SystemModel,
    pair: &mut P,
    bundle: &RiccatiBundle,
    x: &Vector,
    u: &Vector,
    eps: f64,
) -> Result<usize> {
    let l = &bundle.gains.l;
    let mut x = x.clone();
    let mut u = u.clone();
    let mut w = l * sys.drift(&x, &u) + &bundle.v_dir * eps;
    for j in 1..=pair.hbar() + 1 {
        x = sim::step(sys, &x, &u, &w);
        let dec = pair.step(&x)?;
        if dec.sigma {
            return Ok(j);
        }
        u = dec.u;
        w = l * sys.drift(&x, &u);
    }
    Err(Error::NumericalFailure(format!("pair did not transmit within hbar = {}", pair.hbar())))
}

/// Inter-transmission time after a transmission of `xi` at the pair's
/// current time, under the probing disturbance with kick `eps`.
pub fn inter_transmission_time<P: SnapshotPair>(
    sys: &SystemModel,
    pair: &mut P,
    bundle: &RiccatiBundle,
    xi: &Vector,
    eps: f64,
) -> Result<usize> {
    let snap = pair.snapshot()?;
    let result = pair.step_forced(xi).and_then(|dec| probe_inner(sys, pair, bundle, xi, &dec.u, eps));
    pair.restore(&snap)?;
    result
}

/// Extremes of the set of kicks that keep the next transmission more than
/// `h` steps away.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsilonSet {
    pub inf: f64,
    pub sup: f64,
}

/// Grid scan of `[−eps_bar, eps_bar]` with the outermost qualifying points
/// refined by bisection against their failing neighbours.
///
/// Fails with `EmptySet` when no kick other than zero qualifies.
#[allow(clippy::too_many_arguments)]
pub fn epsilon_set<P: SnapshotPair>(
    sys: &SystemModel,
    pair: &mut P,
    bundle: &RiccatiBundle,
    x: &Vector,
    u: &Vector,
    t: usize,
    eps_bar: f64,
    grid_points: usize,
    bisect_tol: f64,
) -> Result<EpsilonSet> {
    let h = bundle.h;
    let np = grid_points.max(2);
    let grid: Vec<f64> = (0..np).map(|i| -eps_bar + 2.0 * eps_bar * i as f64 / (np - 1) as f64).collect();
    let mut qualifies = Vec::with_capacity(np);
    for &e in &grid {
        qualifies.push(probe_from_transmission(sys, pair, bundle, x, u, e)? > h);
    }
    let (Some(lo), Some(hi)) = (qualifies.iter().position(|&q| q), qualifies.iter().rposition(|&q| q)) else {
        return Err(Error::EmptySet { t });
    };
    let mut refine = |mut good: f64, mut bad: f64| -> Result<f64> {
        while (good - bad).abs() >= bisect_tol {
            let mid = 0.5 * (good + bad);
            if probe_from_transmission(sys, pair, bundle, x, u, mid)? > h {
                good = mid;
            } else {
                bad = mid;
            }
        }
        Ok(good)
    };
    let inf = if lo == 0 { grid[0] } else { refine(grid[lo], grid[lo - 1])? };
    let sup = if hi == np - 1 { grid[np - 1] } else { refine(grid[hi], grid[hi + 1])? };
    if sup - inf < bisect_tol {
        return Err(Error::EmptySet { t });
    }
    Ok(EpsilonSet { inf, sup })
}

/// Controls `u_t ..= u_{t+h}` the pair would issue under the unkicked
/// probing disturbance, starting from a transmission of `x` with control `u`.
pub fn counterfactual_controls<P: SnapshotPair>(
    sys: &SystemModel,
    pair: &mut P,
    bundle: &RiccatiBundle,
    x: &Vector,
    u: &Vector,
) -> Result<Vec<Vector>> {
    let snap = pair.snapshot()?;
    let mut run = || -> Result<Vec<Vector>> {
        let l = &bundle.gains.l;
        let mut us = vec![u.clone()];
        let mut x = x.clone();
        for _ in 0..bundle.h {
            let last = us.last().unwrap();
            let w = l * sys.drift(&x, last);
            x = sim::step(sys, &x, last, &w);
            us.push(pair.step(&x)?.u);
        }
        Ok(us)
    };
    let result = run();
    pair.restore(&snap)?;
    result
}

/// Segment value `Σ_{j=0}^{h}(z_jᵀz_j − γ²w_jᵀw_j) + x_{h+1}ᵀP̄x_{h+1} − x_0ᵀP̄x_0`
/// with the controls held at `us` and the probing disturbance with kick `eps`.
pub fn ff1_value(sys: &SystemModel, bundle: &RiccatiBundle, x0: &Vector, us: &[Vector], eps: f64) -> f64 {
    let g2 = bundle.gamma * bundle.gamma;
    let pbar = bundle.pbar();
    let mut x = x0.clone();
    let mut total = 0.0;
    for (j, u) in us.iter().enumerate() {
        let mut w = &bundle.gains.l * sys.drift(&x, u);
        if j == 0 {
            w += &bundle.v_dir * eps;
        }
        total += stage_cost(sys, &x, u) - g2 * w.norm_squared();
        x = sim::step(sys, &x, u, &w);
    }
    total + quad(&x, pbar) - quad(x0, pbar)
}

/// Coefficients of the segment value `aε² + bε + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ff1Coeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Ff1Coeffs {
    pub fn eval(&self, eps: f64) -> f64 {
        (self.a * eps + self.b) * eps + self.c
    }
}

/// Exact quadratic fit through `ε ∈ {−1, 0, 1}` of [`ff1_value`].
pub fn ff1_coeffs_oracle(sys: &SystemModel, bundle: &RiccatiBundle, x: &Vector, us: &[Vector]) -> Ff1Coeffs {
    let j0 = ff1_value(sys, bundle, x, us, 0.0);
    let jp = ff1_value(sys, bundle, x, us, 1.0);
    let jm = ff1_value(sys, bundle, x, us, -1.0);
    Ff1Coeffs { a: 0.5 * (jp + jm - 2.0 * j0), b: 0.5 * (jp - jm), c: j0 }
}

/// Analytic coefficients of the segment value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClosedFf1 {
    /// Curvature from the open-loop ladder, `−vᵀ(γ²I − M_{h+1})v`, with `b`
    /// and `c` from the expansion.
    pub coeffs: Ff1Coeffs,
    /// Curvature from the same expansion as `b` and `c`. Equals the ladder
    /// curvature for `h = 1`; for longer segments the disturbance after the
    /// kick follows the fixed map `L_γ` rather than the ladder's maximizers.
    pub a_expansion: f64,
}

/// Expands the segment along `x_j = φ_j + εψ_j` with
/// `φ_{j+1} = Āφ_j + B̄u_j`, `ψ_1 = v`, `ψ_{j+1} = Āψ_j`,
/// where `Ā = (I + L)A` and `B̄ = (I + L)B`.
pub fn ff1_coeffs_closed(sys: &SystemModel, bundle: &RiccatiBundle, x: &Vector, us: &[Vector]) -> ClosedFf1 {
    let n = sys.n();
    let g2 = bundle.gamma * bundle.gamma;
    let il = Mat::identity(n, n) + &bundle.gains.l;
    let abar = &il * sys.a();
    let bbar = &il * sys.b();
    let l = &bundle.gains.l;
    let q = sys.q();
    let (mut phi, mut psi) = (x.clone(), Vector::zeros(n));
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for (j, u) in us.iter().enumerate() {
        let omega = l * sys.drift(&phi, u);
        let mut nu = l * sys.a() * &psi;
        if j == 0 {
            nu += &bundle.v_dir;
        }
        a += quad(&psi, q) - g2 * nu.norm_squared();
        b += 2.0 * ((&psi.transpose() * q * &phi)[(0, 0)] - g2 * nu.dot(&omega));
        c += quad(&phi, q) + quad(u, sys.r()) - g2 * omega.norm_squared();
        phi = &abar * &phi + &bbar * u;
        psi = if j == 0 { bundle.v_dir.clone() } else { &abar * &psi };
    }
    let pbar = bundle.pbar();
    a += quad(&psi, pbar);
    b += 2.0 * (&psi.transpose() * pbar * &phi)[(0, 0)];
    c += quad(&phi, pbar) - quad(x, pbar);
    ClosedFf1 { coeffs: Ff1Coeffs { a: -bundle.lambda_min, b, c }, a_expansion: a }
}

/// One application of a kicked probing step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsEvent {
    pub t: usize,
    pub eps: f64,
    pub set: EpsilonSet,
    pub coeffs: Ff1Coeffs,
    pub eta: f64,
}

/// Entry into the terminal phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TerminalInfo {
    pub t: usize,
    pub eta: f64,
    pub q: usize,
    /// `x_tᵀG_q x_t`
    pub value_q: f64,
    /// `x_tᵀP̄x_t`
    pub value_pbar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    AttenuationViolated { eta_final: f64, game_sum: f64 },
    RateAtLeastInverseH { rate: f64, probe_failures: usize, delta_bound: u64 },
    InconclusiveAtHorizon { rate: f64, eta_final: f64 },
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Self::AttenuationViolated { .. } => "attenuation_violated",
            Self::RateAtLeastInverseH { .. } => "rate_at_least_inverse_h",
            Self::InconclusiveAtHorizon { .. } => "inconclusive_at_horizon",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdversaryVerdict {
    pub outcome: Outcome,
    pub trace: Trace,
    /// `‖z‖² / ‖w‖²` over the trace.
    pub ratio: f64,
    pub rate: f64,
    pub tail_rate: f64,
    pub game_sum: f64,
    pub eta_final: f64,
    pub probe_failures: usize,
    pub delta_bound: u64,
    pub terminal: Option<TerminalInfo>,
    pub eps_events: Vec<EpsEvent>,
}

struct Terminal {
    k: usize,
    ladder: ZetaLadder,
}

struct AdversarySource<'c> {
    cfg: &'c AdversaryConfig,
    game: f64,
    last_t: usize,
    terminal: Option<Terminal>,
    terminal_info: Option<TerminalInfo>,
    probe_failures: usize,
    events: Vec<EpsEvent>,
}

impl AdversarySource<'_> {
    fn terminal_w(&self, sys: &SystemModel, t: usize, x: &Vector, u: &Vector) -> Vector {
        let term = self.terminal.as_ref().unwrap();
        let q = term.ladder.q;
        if t < term.k + q {
            term.ladder.lbar(q - (t - term.k)) * sys.drift(x, u)
        } else {
            Vector::zeros(sys.n())
        }
    }
}

impl<P: SnapshotPair> DisturbanceSource<P> for AdversarySource<'_> {
    fn next(&mut self, sys: &SystemModel, ctx: StepContext<'_, P>) -> Result<Vector> {
        let cfg = self.cfg;
        let bundle = &cfg.bundle;
        let (t, x, u) = (ctx.t, ctx.x, ctx.u);
        self.last_t = t;
        let pure = bundle.gains.worst_disturbance(sys, x, u);
        let w = if t == 0 {
            cfg.w0.clone()
        } else if self.terminal.is_some() {
            self.terminal_w(sys, t, x, u)
        } else if ctx.sigma {
            let eta = self.game + quad(x, bundle.pbar());
            if eta > 0.0 {
                let ladder = bundle.zeta(sys, x, 0.5 * eta, cfg.q_max)?;
                self.terminal_info = Some(TerminalInfo {
                    t,
                    eta,
                    q: ladder.q,
                    value_q: quad(x, &ladder.g[ladder.q]),
                    value_pbar: quad(x, bundle.pbar()),
                });
                self.terminal = Some(Terminal { k: t, ladder });
                self.terminal_w(sys, t, x, u)
            } else if probe_from_transmission(sys, ctx.pair, bundle, x, u, 0.0)? <= cfg.h {
                pure
            } else {
                self.probe_failures += 1;
                let set = epsilon_set(sys, ctx.pair, bundle, x, u, t, cfg.eps_bar, cfg.grid_points, cfg.bisect_tol)
                    .map_err(|e| match e {
                        Error::EmptySet { t } => Error::AssumptionFiveViolatedAt { t, xi: x.iter().copied().collect() },
                        other => other,
                    })?;
                let us = counterfactual_controls(sys, ctx.pair, bundle, x, u)?;
                let coeffs = ff1_coeffs_oracle(sys, bundle, x, &us);
                let tie = cfg.b_tie_rel * (coeffs.a.abs() + coeffs.c.abs());
                let eps = if coeffs.b >= -tie { set.sup } else { set.inf };
                self.events.push(EpsEvent { t, eps, set, coeffs, eta });
                pure + &bundle.v_dir * eps
            }
        } else {
            pure
        };
        self.game += stage_cost(sys, x, u) - cfg.gamma * cfg.gamma * w.norm_squared();
        Ok(w)
    }

    fn exhausted(&self) -> bool {
        self.terminal.as_ref().is_some_and(|term| self.last_t + 1 >= term.k + term.ladder.q)
    }
}

/// Drives the loop with the adversarial disturbance until a verdict.
pub fn run_adversary<P: SnapshotPair>(
    sys: &SystemModel,
    pair: &mut P,
    cfg: &AdversaryConfig,
) -> Result<AdversaryVerdict> {
    pair.snapshot()?;
    let mut source = AdversarySource {
        cfg,
        game: 0.0,
        last_t: 0,
        terminal: None,
        terminal_info: None,
        probe_failures: 0,
        events: Vec::new(),
    };
    let eta_spec = EtaSpec { gamma: cfg.gamma, pbar: cfg.bundle.pbar().clone() };
    let trace = run_closed_loop(sys, pair, &mut source, cfg.horizon_cap, Some(&eta_spec))?;
    let game_sum = trace.game_sum(cfg.gamma);
    let eta_final = game_sum + quad(&trace.final_x, cfg.bundle.pbar());
    let z2 = trace.z2_total();
    let w2 = trace.w2_total();
    let rate = trace.transmissions().len() as f64 / trace.len() as f64;
    let tail_rate = sim::tail_rate(&trace);
    let delta_bound = cfg.delta_bound();
    let n = source.probe_failures;
    let outcome = if source.terminal.is_some() && game_sum > 0.0 {
        Outcome::AttenuationViolated { eta_final, game_sum }
    } else if source.terminal.is_none() && tail_rate >= 1.0 / cfg.h as f64 - cfg.rate_tol && (n as u64) < delta_bound {
        Outcome::RateAtLeastInverseH { rate: tail_rate, probe_failures: n, delta_bound }
    } else {
        Outcome::InconclusiveAtHorizon { rate: tail_rate, eta_final }
    };
    Ok(AdversaryVerdict {
        outcome,
        ratio: if w2 > 0.0 { z2 / w2 } else { f64::NAN },
        rate,
        tail_rate,
        game_sum,
        eta_final,
        probe_failures: n,
        delta_bound,
        terminal: source.terminal_info,
        eps_events: source.events,
        trace,
    })
}

/// Sampling plan for the empirical check of the uniform kick margin.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    /// Random states drawn from the ball, each paired with a harvested pair state.
    pub count: usize,
    pub radius: f64,
    /// Steps of the pilot run whose pair states and loop states are harvested.
    pub pilot_horizon: usize,
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self { count: 50, radius: 1.0, pilot_horizon: 40, grid_points: 41, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct A5Violation {
    pub t: usize,
    pub xi: Vec<f64>,
    pub eps: f64,
    pub tau: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct A5Report {
    pub gamma: f64,
    pub h: usize,
    pub eps_low: f64,
    pub samples: usize,
    /// Samples where the unkicked probe kept the pair silent for more than `h` steps.
    pub long_gaps: usize,
    pub violations: Vec<A5Violation>,
}

/// For sampled transmission states `ξ` with `T(ξ, t, 0) > h`, checks that
/// every kick in `[−eps_low, eps_low]` keeps the gap above `h`.
///
/// Samples are the states of a pilot run under the unkicked probing
/// disturbance plus random states in a ball, each evaluated against a pair
/// state harvested from the pilot run. The pair is left in its initial state.
pub fn check_assumption5<P: SnapshotPair>(
    sys: &SystemModel,
    pair: &mut P,
    bundle: &RiccatiBundle,
    w0: &Vector,
    eps_low: f64,
    spec: &SampleSpec,
) -> Result<A5Report> {
    let initial = pair.snapshot()?;
    let mut harvested: Vec<(P::Snapshot, usize, Vector)> = Vec::new();
    let mut x = Vector::zeros(sys.n());
    for t in 0..spec.pilot_horizon.max(2) {
        let snap = pair.snapshot()?;
        if t >= 1 {
            harvested.push((snap, t, x.clone()));
        }
        let dec = pair.step(&x)?;
        let w = if t == 0 { w0.clone() } else { bundle.gains.worst_disturbance(sys, &x, &dec.u) };
        x = sim::step(sys, &x, &dec.u, &w);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples: Vec<(usize, Vector)> = (0..harvested.len()).map(|i| (i, harvested[i].2.clone())).collect();
    for i in 0..spec.count {
        samples.push((i % harvested.len(), random_in_ball(&mut rng, sys.n(), spec.radius)));
    }
    let np = spec.grid_points.max(2);
    let mut report = A5Report {
        gamma: bundle.gamma,
        h: bundle.h,
        eps_low,
        samples: samples.len(),
        long_gaps: 0,
        violations: Vec::new(),
    };
    for (idx, xi) in samples {
        let (snap, t, _) = &harvested[idx];
        pair.restore(snap)?;
        if inter_transmission_time(sys, pair, bundle, &xi, 0.0)? <= bundle.h {
            continue;
        }
        report.long_gaps += 1;
        for i in 0..np {
            let eps = -eps_low + 2.0 * eps_low * i as f64 / (np - 1) as f64;
            let tau = inter_transmission_time(sys, pair, bundle, &xi, eps)?;
            if tau <= bundle.h {
                report.violations.push(A5Violation { t: *t, xi: xi.iter().copied().collect(), eps, tau });
                break;
            }
        }
    }
    pair.restore(&initial)?;
    Ok(report)
}

fn random_in_ball(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Vector {
    loop {
        let v = Vector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
        let norm = v.norm();
        if norm <= 1.0 && norm > 1e-3 {
            return v * radius;
        }
    }
}
