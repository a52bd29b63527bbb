//! Riccati operators, fixed points, value ladders and game gains.

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::linalg::{identity, is_pd, min_eig, quad, rel_diff, spd_solve, sym, Mat, Vector};
use crate::model::SystemModel;

/// Numerical knobs shared by the synthesis routines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiOptions {
    /// Relative Frobenius tolerance for fixed-point iterations.
    pub tol_fixpoint: f64,
    pub max_iter: usize,
    /// Iterations without a 0.1% improvement of the best residual before the
    /// iteration is declared stalled at its roundoff floor.
    pub stall_window: usize,
    /// Bisection width for `gamma_h`.
    pub tol_gamma: f64,
    /// Largest gamma tried when bracketing `gamma_h`.
    pub gamma_cap: f64,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self { tol_fixpoint: 1e-12, max_iter: 100_000, stall_window: 200, tol_gamma: 1e-6, gamma_cap: 1e6 }
    }
}

fn gamma_gap(p: &Mat, gamma: f64) -> Mat {
    identity(p.nrows()) * (gamma * gamma) - p
}

/// `P + P(γ²I − P)⁻¹P`
pub fn f_a(p: &Mat, gamma: f64) -> Result<Mat> {
    let gap = gamma_gap(p, gamma);
    if !is_pd(&gap) {
        return Err(Error::GammaInfeasible { gamma, min_eig: min_eig(&gap) });
    }
    let x = spd_solve(&gap, p)?;
    Ok(sym(&(p + p * x)))
}

/// `AᵀPA + Q − AᵀPB(BᵀPB + R)⁻¹BᵀPA`
pub fn f_c(sys: &SystemModel, p: &Mat) -> Result<Mat> {
    let (a, b) = (sys.a(), sys.b());
    let pa = p * a;
    let btpa = b.transpose() * &pa;
    let s = b.transpose() * p * b + sys.r();
    let x = spd_solve(&s, &btpa)?;
    Ok(sym(&(a.transpose() * &pa + sys.q() - btpa.transpose() * x)))
}

/// `AᵀPA + Q`
pub fn f_o(sys: &SystemModel, p: &Mat) -> Mat {
    sym(&(sys.a().transpose() * p * sys.a() + sys.q()))
}

/// Outcome of the game Riccati iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum PbarResult {
    Feasible(Mat),
    /// Some iterate left the region where γ²I − P is positive definite.
    Infeasible,
}

impl PbarResult {
    pub fn feasible(self) -> Option<Mat> {
        match self {
            Self::Feasible(p) => Some(p),
            Self::Infeasible => None,
        }
    }
}

/// Iterates `P ← F_c(F_a(P))` from zero.
///
/// Close to the feasibility boundary the residual stops decreasing at a
/// roundoff floor before reaching `tol_fixpoint`. Such a stall ends the
/// iteration and the last iterate decides feasibility.
pub fn solve_pbar(sys: &SystemModel, gamma: f64, opts: &RiccatiOptions) -> Result<PbarResult> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let n = sys.n();
    let mut p = Mat::zeros(n, n);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut res = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let next = match f_a(&p, gamma) {
            Ok(fa) => f_c(sys, &fa)?,
            Err(Error::GammaInfeasible { .. }) => return Ok(PbarResult::Infeasible),
            Err(e) => return Err(e),
        };
        res = rel_diff(&next, &p);
        p = next;
        if res <= opts.tol_fixpoint {
            return Ok(classify(p, gamma));
        }
        if res < 0.999 * best {
            best = res;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > opts.stall_window {
                return Ok(classify(p, gamma));
            }
        }
    }
    Err(Error::NotConverged { iterations: opts.max_iter, residual: res })
}

fn classify(p: Mat, gamma: f64) -> PbarResult {
    if is_pd(&gamma_gap(&p, gamma)) {
        PbarResult::Feasible(p)
    } else {
        PbarResult::Infeasible
    }
}

/// Controller and disturbance gains of the infinite-horizon game at a given γ.
#[derive(Debug, Clone, PartialEq)]
pub struct GameGains {
    pub gamma: f64,
    pub pbar: Mat,
    /// `F_a(P̄)`
    pub fa_pbar: Mat,
    /// Optimal state-feedback gain, `u = K x`.
    pub k: Mat,
    /// Worst-case disturbance map, applied to `Ax + Bu`.
    pub l: Mat,
    /// `R + Bᵀ F_a(P̄) B`
    pub r_tilde: Mat,
}

impl GameGains {
    pub fn new(sys: &SystemModel, gamma: f64, opts: &RiccatiOptions) -> Result<Self> {
        match solve_pbar(sys, gamma, opts)? {
            PbarResult::Feasible(p) => synth_gains(sys, gamma, &p),
            PbarResult::Infeasible => Err(Error::GammaInfeasible { gamma, min_eig: f64::NAN }),
        }
    }

    /// `x̂⁺ = (I + L)(A + BK) x̂`, the closed loop under the worst-case disturbance.
    pub fn predictor(&self, sys: &SystemModel) -> Mat {
        (identity(sys.n()) + &self.l) * (sys.a() + sys.b() * &self.k)
    }

    /// `w = L(Ax + Bu)`
    pub fn worst_disturbance(&self, sys: &SystemModel, x: &Vector, u: &Vector) -> Vector {
        &self.l * sys.drift(x, u)
    }
}

/// Gains `K_γ = −(R + BᵀF_a(P̄)B)⁻¹BᵀF_a(P̄)A` and `L_γ = (γ²I − P̄)⁻¹P̄`.
pub fn synth_gains(sys: &SystemModel, gamma: f64, pbar: &Mat) -> Result<GameGains> {
    let fa = f_a(pbar, gamma)?;
    let b = sys.b();
    let r_tilde = sym(&(sys.r() + b.transpose() * &fa * b));
    let k = -spd_solve(&r_tilde, &(b.transpose() * &fa * sys.a()))?;
    let l = spd_solve(&gamma_gap(pbar, gamma), pbar)?;
    Ok(GameGains { gamma, pbar: pbar.clone(), fa_pbar: fa, k, l, r_tilde })
}

/// Result of the open-loop value ladder `M_{k+1} = F_o(F_a(M_k))`.
#[derive(Debug, Clone, PartialEq)]
pub enum Ladder {
    /// `M_1 ..= M_{h_max+1}`
    Complete(Vec<Mat>),
    /// `γ²I − M_k` failed to be positive definite at this 1-based index;
    /// `partial` holds `M_1 ..= M_k`.
    InfeasibleAt { k: usize, partial: Vec<Mat> },
}

pub fn m_ladder(sys: &SystemModel, gamma: f64, pbar: &Mat, h_max: usize) -> Ladder {
    let mut ms = vec![pbar.clone()];
    for k in 1..=h_max {
        match f_a(&ms[k - 1], gamma) {
            Ok(fa) => ms.push(f_o(sys, &fa)),
            Err(_) => return Ladder::InfeasibleAt { k, partial: ms },
        }
    }
    Ladder::Complete(ms)
}

/// The joint predicate behind `gamma_h`: P̄_γ exists and γ²I − M_h ≻ 0.
pub fn periodic_feasible(sys: &SystemModel, gamma: f64, h: usize, opts: &RiccatiOptions) -> Result<bool> {
    let Some(p) = solve_pbar(sys, gamma, opts)?.feasible() else {
        return Ok(false);
    };
    Ok(match m_ladder(sys, gamma, &p, h - 1) {
        Ladder::Complete(ms) => is_pd(&gamma_gap(&ms[h - 1], gamma)),
        Ladder::InfeasibleAt { .. } => false,
    })
}

/// Smallest attenuation level achievable with transmissions every `h` steps.
pub fn gamma_h(sys: &SystemModel, h: usize, opts: &RiccatiOptions) -> Result<f64> {
    if h == 0 {
        return Err(Error::HorizonTooSmall);
    }
    let mut hi = 1.0;
    while !periodic_feasible(sys, hi, h, opts)? {
        hi *= 2.0;
        if hi > opts.gamma_cap {
            return Err(Error::NotBracketed { cap: opts.gamma_cap });
        }
    }
    let mut lo = 0.0;
    while hi - lo > opts.tol_gamma {
        let mid = 0.5 * (lo + hi);
        if periodic_feasible(sys, mid, h, opts)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Smallest eigenpair of a symmetric matrix, with the eigenvector's first
/// nonzero component made positive.
pub fn smallest_eigenpair(m: &Mat) -> (f64, Vector) {
    let eig = SymmetricEigen::new(sym(m));
    let idx = eig.eigenvalues.imin();
    let mut v: Vector = eig.eigenvectors.column(idx).into_owned();
    v /= v.norm();
    let scale = v.amax();
    if let Some(first) = v.iter().copied().find(|c| c.abs() > 1e-12 * scale) {
        if first < 0.0 {
            v = -v;
        }
    }
    (eig.eigenvalues[idx], v)
}

/// Direction in which a one-step disturbance kick hurts most when the
/// controller is blind for `h` further steps.
pub fn worst_direction(sys: &SystemModel, gamma: f64, h: usize, opts: &RiccatiOptions) -> Result<(f64, Vector)> {
    let gains = GameGains::new(sys, gamma, opts)?;
    let ms = match m_ladder(sys, gamma, &gains.pbar, h) {
        Ladder::Complete(ms) => ms,
        Ladder::InfeasibleAt { .. } => return Err(Error::AssumptionFourViolated { gamma, h, lambda_min: f64::NAN }),
    };
    direction_from_ladder(&ms, gamma, h)
}

fn direction_from_ladder(ms: &[Mat], gamma: f64, h: usize) -> Result<(f64, Vector)> {
    let (lambda_min, v) = smallest_eigenpair(&gamma_gap(&ms[h], gamma));
    if lambda_min >= 0.0 {
        return Err(Error::AssumptionFourViolated { gamma, h, lambda_min });
    }
    Ok((lambda_min, v))
}

/// Stabilizing solution of the LQR Riccati equation by value iteration.
pub fn solve_plq(sys: &SystemModel, tol: f64, max_iter: usize) -> Result<Mat> {
    let n = sys.n();
    let mut p = Mat::zeros(n, n);
    let mut res = f64::INFINITY;
    for _ in 0..max_iter {
        let next = f_c(sys, &p)?;
        res = rel_diff(&next, &p);
        p = next;
        if res <= tol {
            return Ok(p);
        }
    }
    Err(Error::NotConverged { iterations: max_iter, residual: res })
}

/// Finite-horizon game ladder started from the LQR value.
#[derive(Debug, Clone, PartialEq)]
pub struct ZetaLadder {
    /// Smallest index with `|xᵀG_q x − xᵀP̄x| < β`.
    pub q: usize,
    /// `G_0 ..= G_q`
    pub g: Vec<Mat>,
    /// `lbar[k - 1]` is `L̄_k = (γ²I − G_{k−1})⁻¹G_{k−1}` for `k = 1..=q`.
    pub lbar: Vec<Mat>,
}

impl ZetaLadder {
    /// `L̄_k` for `1 ≤ k ≤ q`.
    pub fn lbar(&self, k: usize) -> &Mat {
        &self.lbar[k - 1]
    }
}

/// Runs `G_{k+1} = F_c(F_a(G_k))` from `G_0 = P_LQ` until `xᵀG_q x` is within
/// `beta` of `xᵀP̄x`.
pub fn g_ladder_zeta_from(
    sys: &SystemModel,
    gamma: f64,
    pbar: &Mat,
    plq: &Mat,
    x: &Vector,
    beta: f64,
    q_max: usize,
) -> Result<ZetaLadder> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let target = quad(x, pbar);
    let mut g = vec![plq.clone()];
    let mut lbar = Vec::new();
    while (quad(x, g.last().unwrap()) - target).abs() >= beta {
        if g.len() > q_max {
            return Err(Error::ZetaNotReached { q_max });
        }
        let last = g.last().unwrap();
        lbar.push(spd_solve(&gamma_gap(last, gamma), last)?);
        let next = f_c(sys, &f_a(last, gamma)?)?;
        g.push(next);
    }
    Ok(ZetaLadder { q: g.len() - 1, g, lbar })
}

/// As [`g_ladder_zeta_from`], solving for P̄_γ and P_LQ first.
pub fn g_ladder_zeta(
    sys: &SystemModel,
    gamma: f64,
    x: &Vector,
    beta: f64,
    q_max: usize,
    opts: &RiccatiOptions,
) -> Result<ZetaLadder> {
    let gains = GameGains::new(sys, gamma, opts)?;
    let plq = solve_plq(sys, opts.tol_fixpoint, opts.max_iter)?;
    g_ladder_zeta_from(sys, gamma, &gains.pbar, &plq, x, beta, q_max)
}

/// Everything the probing adversary needs at one (γ, h).
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiBundle {
    pub gamma: f64,
    pub h: usize,
    pub gains: GameGains,
    /// `M_1 ..= M_{h+1}`
    pub m_ladder: Vec<Mat>,
    /// Unit eigenvector of the smallest eigenvalue of `γ²I − M_{h+1}`.
    pub v_dir: Vector,
    pub lambda_min: f64,
    pub plq: Mat,
}

impl RiccatiBundle {
    /// Fails with `AssumptionFourViolated` unless γ²I − M_{h+1} has a negative
    /// eigenvalue.
    pub fn new(sys: &SystemModel, gamma: f64, h: usize, opts: &RiccatiOptions) -> Result<Self> {
        if h == 0 {
            return Err(Error::HorizonTooSmall);
        }
        let gains = GameGains::new(sys, gamma, opts)?;
        let m_ladder = match m_ladder(sys, gamma, &gains.pbar, h) {
            Ladder::Complete(ms) => ms,
            Ladder::InfeasibleAt { .. } => {
                return Err(Error::AssumptionFourViolated { gamma, h, lambda_min: f64::NAN })
            }
        };
        let (lambda_min, v_dir) = direction_from_ladder(&m_ladder, gamma, h)?;
        let plq = solve_plq(sys, opts.tol_fixpoint, opts.max_iter)?;
        Ok(Self { gamma, h, gains, m_ladder, v_dir, lambda_min, plq })
    }

    pub fn pbar(&self) -> &Mat {
        &self.gains.pbar
    }

    /// `γ²I − P̄`
    pub fn gap(&self) -> Mat {
        gamma_gap(&self.gains.pbar, self.gamma)
    }

    pub fn zeta(&self, sys: &SystemModel, x: &Vector, beta: f64, q_max: usize) -> Result<ZetaLadder> {
        g_ladder_zeta_from(sys, self.gamma, &self.gains.pbar, &self.plq, x, beta, q_max)
    }
}
