use approx::assert_relative_eq;
use etc_hinf::linalg::{min_eig, rel_diff};
use etc_hinf::riccati::*;
use etc_hinf::{Error, Mat, SystemModel, Vector};
use proptest::prelude::*;

fn scalar() -> SystemModel {
    SystemModel::scalar(1.0, 1.0, 1.0, 1.0).unwrap()
}

fn third_order() -> SystemModel {
    SystemModel::from_rows(
        &[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![-1.0, -2.0, -1.0]],
        &[vec![0.0], vec![0.0], vec![1.0]],
        &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        &[vec![1.0]],
    )
    .unwrap()
}

fn opts() -> RiccatiOptions {
    RiccatiOptions::default()
}

fn one(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

/// Positive root of `P² − P − γ²/(γ² − 1) = 0`, the scalar game fixed point.
fn scalar_pbar_oracle(gamma: f64) -> f64 {
    let g2 = gamma * gamma;
    let c = g2 / (g2 - 1.0);
    0.5 * (1.0 + (1.0 + 4.0 * c).sqrt())
}

#[test]
fn scalar_f_a_closed_form() {
    let (p, g) = (1.9494965, 1.4748);
    let expected = p * g * g / (g * g - p);
    let got = f_a(&one(p), g).unwrap()[(0, 0)];
    assert_relative_eq!(got, expected, max_relative = 1e-12);
    assert!((got - 18.800).abs() < 1e-2);
}

#[test]
fn scalar_f_c_closed_form() {
    let s = 18.80046;
    let got = f_c(&scalar(), &one(s)).unwrap()[(0, 0)];
    assert_relative_eq!(got, (2.0 * s + 1.0) / (s + 1.0), max_relative = 1e-12);
    assert!((got - 1.94950).abs() < 1e-4);
}

#[test]
fn f_c_preserves_symmetry() {
    let sys = third_order();
    let p = Mat::from_row_slice(3, 3, &[2.0, 0.3, -0.1, 0.3, 1.5, 0.2, -0.1, 0.2, 1.0]);
    let r = f_c(&sys, &p).unwrap();
    assert!((&r - r.transpose()).norm() <= 1e-12);
}

#[test]
fn f_o_with_zero_dynamics_is_q() {
    let sys =
        SystemModel::new(Mat::zeros(2, 2), Mat::identity(2, 2), Mat::identity(2, 2), Mat::identity(2, 2)).unwrap();
    let p = Mat::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
    assert_eq!(f_o(&sys, &p), Mat::identity(2, 2));
}

#[test]
fn scalar_pbar_matches_quadratic_root() {
    let p = solve_pbar(&scalar(), 1.4748, &opts()).unwrap().feasible().unwrap()[(0, 0)];
    assert_relative_eq!(p, scalar_pbar_oracle(1.4748), max_relative = 1e-10);
    assert!((p - 1.94950).abs() < 1e-3);
}

#[test]
fn scalar_pbar_between_lqr_value_and_gamma_squared() {
    let p = solve_pbar(&scalar(), 10.0, &opts()).unwrap().feasible().unwrap()[(0, 0)];
    let plq = 0.5 * (1.0 + 5f64.sqrt());
    assert!(p > plq && p < 100.0);
}

#[test]
fn pbar_fixed_point_residual() {
    for (sys, g) in [(scalar(), 1.4748), (scalar(), 3.0), (third_order(), 14.0), (third_order(), 5.0)] {
        let p = solve_pbar(&sys, g, &opts()).unwrap().feasible().unwrap();
        let next = f_c(&sys, &f_a(&p, g).unwrap()).unwrap();
        assert!(rel_diff(&next, &p) <= 1e-12, "residual at gamma {g}");
        assert!(min_eig(&(Mat::identity(sys.n(), sys.n()) * g * g - &p)) > 0.0);
    }
}

#[test]
fn scalar_gains() {
    let gains = GameGains::new(&scalar(), 1.4748, &opts()).unwrap();
    let k = gains.k[(0, 0)];
    let l = gains.l[(0, 0)];
    assert_relative_eq!(k, -0.9495, max_relative = 1e-2);
    assert_relative_eq!(l, 8.6463, max_relative = 1e-2);
    assert_relative_eq!(l * (1.0 + k), 0.4366, max_relative = 1e-2);
    // Scalar closed forms: K = −S/(1+S) with S = F_a(P̄), L = P̄/(γ² − P̄).
    let p = scalar_pbar_oracle(1.4748);
    let s = p * 1.4748f64.powi(2) / (1.4748f64.powi(2) - p);
    assert_relative_eq!(k, -s / (1.0 + s), max_relative = 1e-9);
    assert_relative_eq!(l, p / (1.4748f64.powi(2) - p), max_relative = 1e-9);
}

#[test]
fn gains_of_zero_value_vanish() {
    let gains = synth_gains(&third_order(), 5.0, &Mat::zeros(3, 3)).unwrap();
    assert_eq!(gains.k, Mat::zeros(1, 3));
    assert_eq!(gains.l, Mat::zeros(3, 3));
}

#[test]
fn scalar_ladder_between_second_and_third_level() {
    // γ₂ < γ < γ₃: the second rung is feasible, the third is not.
    let g = 2.5;
    let p = solve_pbar(&scalar(), g, &opts()).unwrap().feasible().unwrap();
    let Ladder::Complete(ms) = m_ladder(&scalar(), g, &p, 2) else { panic!("ladder infeasible") };
    assert!(g * g - ms[0][(0, 0)] > 0.0);
    assert!(g * g - ms[1][(0, 0)] > 0.0);
    assert!(g * g - ms[2][(0, 0)] < 0.0);
    match m_ladder(&scalar(), g, &p, 3) {
        Ladder::InfeasibleAt { k, partial } => {
            assert_eq!(k, 3);
            assert_eq!(partial.len(), 3);
        }
        other => panic!("expected infeasibility, got {other:?}"),
    }
}

#[test]
fn ladder_with_zero_dynamics_is_constant() {
    let sys =
        SystemModel::new(Mat::zeros(2, 2), Mat::identity(2, 2), Mat::identity(2, 2), Mat::identity(2, 2)).unwrap();
    let p = solve_pbar(&sys, 3.0, &opts()).unwrap().feasible().unwrap();
    let Ladder::Complete(ms) = m_ladder(&sys, 3.0, &p, 4) else { panic!() };
    for m in &ms[1..] {
        assert_relative_eq!(m, &Mat::identity(2, 2), epsilon = 1e-14);
    }
}

#[test]
fn scalar_gamma_ladder() {
    let expected = [2f64.sqrt(), 2.0199, 2.645, 3.276, 3.909];
    for (h, e) in (1..=5).zip(expected) {
        let g = gamma_h(&scalar(), h, &opts()).unwrap();
        assert!((g - e).abs() < 1e-3, "h = {h}: {g}");
    }
    assert!((gamma_h(&scalar(), 1, &opts()).unwrap() - 2f64.sqrt()).abs() < 1e-5);
}

#[test]
fn third_order_gamma_ladder() {
    let expected = [3.784, 6.898, 7.968, 13.185, 15.908];
    for (h, e) in (1..=5).zip(expected) {
        let g = gamma_h(&third_order(), h, &opts()).unwrap();
        assert!((g - e).abs() < 1e-2, "h = {h}: {g}");
    }
}

#[test]
fn gamma_ladder_is_monotone_and_bisection_consistent() {
    let o = opts();
    for sys in [scalar(), third_order()] {
        let mut prev = 0.0;
        for h in 1..=5 {
            let g = gamma_h(&sys, h, &o).unwrap();
            assert!(g >= prev - o.tol_gamma);
            assert!(periodic_feasible(&sys, g + 10.0 * o.tol_gamma, h, &o).unwrap());
            assert!(!periodic_feasible(&sys, g - 10.0 * o.tol_gamma, h, &o).unwrap());
            prev = g;
        }
    }
}

#[test]
fn gamma_h_rejects_zero_period() {
    assert_eq!(gamma_h(&scalar(), 0, &opts()), Err(Error::HorizonTooSmall));
}

#[test]
fn gamma_h_reports_unbracketed_cap() {
    let o = RiccatiOptions { gamma_cap: 1.2, ..opts() };
    assert!(matches!(gamma_h(&scalar(), 1, &o), Err(Error::NotBracketed { .. })));
}

#[test]
fn worst_direction_eigenpair() {
    for (sys, g, h) in [(scalar(), 1.4748, 1), (third_order(), 14.0, 4), (third_order(), 7.5, 2)] {
        let b = RiccatiBundle::new(&sys, g, h, &opts()).unwrap();
        let n = sys.n();
        let gap = Mat::identity(n, n) * g * g - &b.m_ladder[h];
        let resid = (&gap * &b.v_dir - &b.v_dir * b.lambda_min).norm();
        assert!(resid <= 1e-10, "eigen residual {resid}");
        assert!((b.v_dir.norm() - 1.0).abs() <= 1e-12);
        assert!(b.lambda_min < 0.0);
        let first = b.v_dir.iter().find(|c| c.abs() > 1e-12).unwrap();
        assert!(*first > 0.0);
    }
}

#[test]
fn third_order_worst_direction_value() {
    let (lambda, v) = worst_direction(&third_order(), 14.0, 4, &opts()).unwrap();
    assert!((lambda + 406.57).abs() < 0.05, "{lambda}");
    let expected = Vector::from_vec(vec![0.54714284, 0.68060349, -0.48725106]);
    assert!((v - expected).norm() < 1e-6);
}

#[test]
fn scalar_worst_direction_is_unit() {
    let (lambda, v) = worst_direction(&scalar(), 1.4748, 1, &opts()).unwrap();
    assert_eq!(v[0], 1.0);
    let b = RiccatiBundle::new(&scalar(), 1.4748, 1, &opts()).unwrap();
    assert_relative_eq!(lambda, 1.4748f64.powi(2) - b.m_ladder[1][(0, 0)], max_relative = 1e-12);
}

#[test]
fn scalar_plq_is_golden_ratio() {
    let p = solve_plq(&scalar(), 1e-13, 10_000).unwrap()[(0, 0)];
    assert!((p - 0.5 * (1.0 + 5f64.sqrt())).abs() < 1e-6);
}

#[test]
fn plq_fixed_point_residual() {
    let sys = third_order();
    let p = solve_plq(&sys, 1e-13, 100_000).unwrap();
    assert!(rel_diff(&f_c(&sys, &p).unwrap(), &p) <= 1e-12);
}

#[test]
fn large_gamma_limit_is_lqr_value() {
    for sys in [scalar(), third_order()] {
        let p = solve_pbar(&sys, 1e4, &opts()).unwrap().feasible().unwrap();
        let plq = solve_plq(&sys, 1e-13, 100_000).unwrap();
        assert!((&p - &plq).norm() <= 1e-4);
    }
}

#[test]
fn scalar_zeta_ladder() {
    let g = 1.4748;
    let x = Vector::from_element(1, 1.0);
    let z = g_ladder_zeta(&scalar(), g, &x, 1e-4, 1000, &opts()).unwrap();
    let p = scalar_pbar_oracle(g);
    assert!((z.g[z.q][(0, 0)] - p).abs() < 1e-4);
    assert!((z.g[z.q - 1][(0, 0)] - p).abs() >= 1e-4);
    for w in z.g.windows(2) {
        assert!(w[1][(0, 0)] > w[0][(0, 0)]);
    }
    // Independent scalar recursion G⁺ = (2S + 1)/(S + 1), S = Gγ²/(γ² − G).
    let mut gk = 0.5 * (1.0 + 5f64.sqrt());
    for k in 0..=z.q {
        assert_relative_eq!(z.g[k][(0, 0)], gk, max_relative = 1e-12);
        if k >= 1 {
            let prev = z.g[k - 1][(0, 0)];
            assert_relative_eq!(z.lbar(k)[(0, 0)], prev / (g * g - prev), max_relative = 1e-12);
        }
        let s = gk * g * g / (g * g - gk);
        gk = (2.0 * s + 1.0) / (s + 1.0);
    }
}

#[test]
fn scalar_zeta_first_values() {
    let x = Vector::from_element(1, 1.0);
    let z = g_ladder_zeta(&scalar(), 1.4748, &x, 1e-9, 1000, &opts()).unwrap();
    let expected = [1.618034, 1.863356, 1.928588, 1.944509, 1.948311, 1.949215];
    for (k, e) in expected.iter().enumerate() {
        assert!((z.g[k][(0, 0)] - e).abs() < 1e-6);
    }
}

#[test]
fn zeta_reports_unreachable_tolerance() {
    let x = Vector::from_element(1, 1.0);
    let r = g_ladder_zeta(&scalar(), 1.4748, &x, 1e-30, 50, &opts());
    assert_eq!(r.unwrap_err(), Error::ZetaNotReached { q_max: 50 });
}

#[test]
fn bundle_rejects_gamma_outside_interval() {
    let r = RiccatiBundle::new(&scalar(), 2.1, 1, &opts());
    assert!(matches!(r, Err(Error::AssumptionFourViolated { .. })));
    let r = RiccatiBundle::new(&scalar(), 1.2, 1, &opts());
    assert!(matches!(r, Err(Error::GammaInfeasible { .. })));
}

fn random_system(n: usize, seed: &[f64]) -> Option<SystemModel> {
    let a = Mat::from_fn(n, n, |i, j| seed[i * n + j]);
    let b = Mat::from_fn(n, 1, |i, _| seed[n * n + i] + if i == n - 1 { 1.5 } else { 0.0 });
    SystemModel::new(a, b, Mat::identity(n, n), Mat::identity(1, 1)).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ladders_are_monotone(
        n in 1usize..=3,
        seed in prop::collection::vec(-1.2f64..1.2, 12),
        h in 1usize..=4,
        margin in 1.01f64..1.5,
    ) {
        let Some(sys) = random_system(n, &seed) else { return Ok(()) };
        let o = opts();
        let Ok(gh) = gamma_h(&sys, h, &o) else { return Ok(()) };
        let g = gh * margin;
        let p = solve_pbar(&sys, g, &o).unwrap().feasible().unwrap();
        let ms = match m_ladder(&sys, g, &p, h) {
            Ladder::Complete(ms) => ms,
            Ladder::InfeasibleAt { partial, .. } => partial,
        };
        for w in ms.windows(2) {
            prop_assert!(min_eig(&(&w[1] - &w[0])) >= -1e-9 * w[1].norm().max(1.0));
        }
        let plq = solve_plq(&sys, 1e-13, 100_000).unwrap();
        let x = Vector::from_element(n, 1.0);
        let z = g_ladder_zeta_from(&sys, g, &p, &plq, &x, 1e-6 * x.norm_squared() * p.norm().max(1.0), 100_000).unwrap();
        for w in z.g.windows(2) {
            prop_assert!(min_eig(&(&w[1] - &w[0])) >= -1e-9 * w[1].norm().max(1.0));
        }
        for gk in &z.g {
            prop_assert!(min_eig(&(Mat::identity(n, n) * g * g - gk)) > 0.0);
        }
    }
}
