use etc_hinf::adversary::*;
use etc_hinf::linalg::quad;
use etc_hinf::policies::*;
use etc_hinf::riccati::{RiccatiBundle, RiccatiOptions};
use etc_hinf::sim::{read_trace_csv, write_trace_csv};
use etc_hinf::{Error, SystemModel, Vector};
use proptest::prelude::*;

const GAMMA: f64 = 1.4748;

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

fn v1(x: f64) -> Vector {
    Vector::from_element(1, x)
}

fn pair(sys: &SystemModel, c: ControllerSpec, s: SchedulerSpec) -> PolicyPair {
    PolicyPair::new(sys, &c, &s, &opts()).unwrap()
}

fn game_trigger(gamma_bar: f64) -> SchedulerSpec {
    SchedulerSpec::GameTrigger { gamma_bar, hbar: 2, weight: WeightMode::Direct }
}

fn deadband_pair() -> PolicyPair {
    pair(
        &scalar(),
        ControllerSpec::GamePredictive { gamma_bar: GAMMA },
        SchedulerSpec::DeadbandWrapped {
            inner: Box::new(game_trigger(GAMMA)),
            gamma: GAMMA,
            h: 1,
            eps_low: 0.03,
            tol_match: 1e-9,
        },
    )
}

fn threshold_pair() -> PolicyPair {
    pair(
        &scalar(),
        ControllerSpec::Hold { k: None, gamma: Some(GAMMA) },
        SchedulerSpec::Threshold { x: vec![vec![1.0]], rho: 0.04, hbar: 2 },
    )
}

fn scalar_bundle() -> RiccatiBundle {
    RiccatiBundle::new(&scalar(), GAMMA, 1, &opts()).unwrap()
}

/// Steps the pair through the forced start and one transmission at `x`.
fn at_transmission(p: &mut PolicyPair, x: f64) -> Vector {
    p.step(&v1(0.0)).unwrap();
    let d = p.step(&v1(x)).unwrap();
    assert!(d.sigma);
    d.u
}

#[test]
fn periodic_gap_ignores_kick() {
    let sys = scalar();
    let bundle = scalar_bundle();
    for h in 1..=4 {
        let mut p = pair(&sys, ControllerSpec::Hold { k: None, gamma: Some(GAMMA) }, SchedulerSpec::Periodic { h });
        // Periodic transmissions are locked to multiples of h.
        for _ in 0..h {
            p.step(&v1(0.0)).unwrap();
        }
        for eps in [-0.5, 0.0, 0.1] {
            for xi in [-1.0, 0.3, 2.0] {
                assert_eq!(inter_transmission_time(&sys, &mut p, &bundle, &v1(xi), eps).unwrap(), h);
            }
        }
    }
}

#[test]
fn game_trigger_fires_on_any_kick() {
    let sys = scalar();
    let bundle = scalar_bundle();
    let mut p = pair(&sys, ControllerSpec::GamePredictive { gamma_bar: GAMMA }, game_trigger(GAMMA));
    p.step(&v1(0.0)).unwrap();
    for eps in [-0.1, -1e-3, 1e-4, 0.05] {
        assert_eq!(inter_transmission_time(&sys, &mut p, &bundle, &v1(0.8), eps).unwrap(), 1, "eps = {eps}");
    }
    assert_eq!(inter_transmission_time(&sys, &mut p, &bundle, &v1(0.8), 0.0).unwrap(), 2);
}

#[test]
fn deadband_holds_for_small_kicks() {
    let sys = scalar();
    let bundle = scalar_bundle();
    let mut p = deadband_pair();
    p.step(&v1(0.0)).unwrap();
    for eps in [-0.03, -0.01, 0.0, 0.02, 0.03] {
        assert_eq!(inter_transmission_time(&sys, &mut p, &bundle, &v1(0.8), eps).unwrap(), 2, "eps = {eps}");
    }
    assert_eq!(inter_transmission_time(&sys, &mut p, &bundle, &v1(0.8), 0.031).unwrap(), 1);
}

#[test]
fn deadband_epsilon_set() {
    let sys = scalar();
    let bundle = scalar_bundle();
    let mut p = deadband_pair();
    let u = at_transmission(&mut p, 0.8);
    let x = v1(0.8);
    let set = epsilon_set(&sys, &mut p, &bundle, &x, &u, 1, 0.03, 201, 1e-6).unwrap();
    assert!((set.inf + 0.03).abs() < 1e-5 && (set.sup - 0.03).abs() < 1e-5, "{set:?}");
    // A wider scan localizes the deadband edge by bisection.
    let set = epsilon_set(&sys, &mut p, &bundle, &x, &u, 1, 0.1, 201, 1e-6).unwrap();
    assert!((set.inf + 0.03).abs() < 1e-5 && (set.sup - 0.03).abs() < 1e-5, "{set:?}");
}

#[test]
fn wide_periodic_epsilon_set_is_full_interval() {
    let sys = scalar();
    let bundle = scalar_bundle();
    let mut p = pair(&sys, ControllerSpec::Hold { k: None, gamma: Some(GAMMA) }, SchedulerSpec::Periodic { h: 2 });
    p.step(&v1(0.0)).unwrap();
    let u = at_transmission(&mut p, 0.5);
    let set = epsilon_set(&sys, &mut p, &bundle, &v1(0.5), &u, 2, 0.07, 21, 1e-6).unwrap();
    assert_eq!(set, EpsilonSet { inf: -0.07, sup: 0.07 });
}

#[test]
fn empty_epsilon_set_is_reported() {
    let sys = scalar();
    let bundle = scalar_bundle();
    let mut p = pair(&sys, ControllerSpec::GamePredictive { gamma_bar: GAMMA }, game_trigger(GAMMA));
    let u = at_transmission(&mut p, 0.8);
    let r = epsilon_set(&sys, &mut p, &bundle, &v1(0.8), &u, 1, 0.1, 201, 1e-6);
    assert_eq!(r, Err(Error::EmptySet { t: 1 }));
}

#[test]
fn game_trigger_pair_violates_uniform_margin() {
    let cfg = AdversaryConfig::new(&scalar(), GAMMA, 1, v1(1.0), 0.1, 0.03, &opts()).unwrap();
    let mut p = pair(&scalar(), ControllerSpec::GamePredictive { gamma_bar: GAMMA }, game_trigger(GAMMA));
    let r = run_adversary(&scalar(), &mut p, &cfg);
    assert!(matches!(r, Err(Error::AssumptionFiveViolatedAt { t: 1, .. })), "{r:?}");
}

#[test]
fn probing_probe_leaves_pair_untouched() {
    let sys = scalar();
    let bundle = scalar_bundle();
    let mut probed = deadband_pair();
    let mut control = deadband_pair();
    let u = at_transmission(&mut probed, 0.8);
    at_transmission(&mut control, 0.8);
    epsilon_set(&sys, &mut probed, &bundle, &v1(0.8), &u, 1, 0.1, 51, 1e-6).unwrap();
    counterfactual_controls(&sys, &mut probed, &bundle, &v1(0.8), &u).unwrap();
    probe_from_transmission(&sys, &mut probed, &bundle, &v1(0.8), &u, 0.5).unwrap();
    for x in [0.41, 0.2, -0.05, 0.7, 0.33] {
        let a = probed.step(&v1(x)).unwrap();
        let b = control.step(&v1(x)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.u[0].to_bits(), b.u[0].to_bits());
    }
}

#[test]
fn counterfactual_controls_follow_the_pair() {
    let sys = scalar();
    let bundle = RiccatiBundle::new(&sys, 2.3, 2, &opts()).unwrap();
    let mut p = pair(&sys, ControllerSpec::GamePredictive { gamma_bar: 2.3 }, SchedulerSpec::Periodic { h: 3 });
    let u = at_transmission(&mut p, 1.0);
    let us = counterfactual_controls(&sys, &mut p, &bundle, &v1(1.0), &u).unwrap();
    assert_eq!(us.len(), 3);
    let phi = p.predictor()[(0, 0)];
    let k = p.gain()[(0, 0)];
    for (j, uj) in us.iter().enumerate() {
        assert!((uj[0] - k * phi.powi(j as i32)).abs() < 1e-12);
    }
}

fn random_controls(m: usize, count: usize, seed: &[f64]) -> Vec<Vector> {
    (0..count).map(|j| Vector::from_fn(m, |i, _| seed[(j * m + i) % seed.len()])).collect()
}

#[test]
fn ff1_fit_is_exact_and_matches_expansion() {
    for (sys, gamma, h) in [(scalar(), GAMMA, 1), (scalar(), 3.0, 3), (third_order(), 14.0, 4), (third_order(), 7.5, 2)]
    {
        let bundle = RiccatiBundle::new(&sys, gamma, h, &opts()).unwrap();
        let x = Vector::from_fn(sys.n(), |i, _| 0.7 - 0.4 * i as f64);
        let us = random_controls(sys.m(), h + 1, &[0.3, -1.1, 0.25, 0.9]);
        let fit = ff1_coeffs_oracle(&sys, &bundle, &x, &us);
        for eps in [-2.7, -0.3, 0.05, 0.61, 4.0] {
            let j = ff1_value(&sys, &bundle, &x, &us, eps);
            assert!((fit.eval(eps) - j).abs() <= 1e-10 * j.abs().max(1.0), "eps {eps}: {} vs {j}", fit.eval(eps));
        }
        let closed = ff1_coeffs_closed(&sys, &bundle, &x, &us);
        let scale = fit.a.abs() + fit.b.abs() + fit.c.abs();
        assert!((closed.coeffs.b - fit.b).abs() <= 1e-8 * scale);
        assert!((closed.coeffs.c - fit.c).abs() <= 1e-8 * scale);
        assert!((closed.a_expansion - fit.a).abs() <= 1e-8 * scale);
    }
}

#[test]
fn ff1_curvature_matches_eigenvalue_only_for_single_step() {
    // For h = 1 the held-control curvature equals −λ_min > 0. For longer
    // segments the held controls are not re-optimized and the curvature is
    // negative; the adversary relies only on b and the measured ε-set.
    let sys = scalar();
    let bundle = scalar_bundle();
    let us = vec![v1(0.2), v1(-0.1)];
    let fit = ff1_coeffs_oracle(&sys, &bundle, &v1(1.0), &us);
    assert!((fit.a + bundle.lambda_min).abs() < 1e-9 * fit.a.abs());
    assert!(fit.a > 0.0);

    let sys3 = third_order();
    let bundle = RiccatiBundle::new(&sys3, 14.0, 4, &opts()).unwrap();
    let us = random_controls(1, 5, &[0.0]);
    let fit = ff1_coeffs_oracle(&sys3, &bundle, &Vector::zeros(3), &us);
    assert!(fit.a < 0.0 && bundle.lambda_min < 0.0);
}

#[test]
fn ff1_zero_segment_has_zero_linear_and_constant_terms() {
    let sys = third_order();
    let bundle = RiccatiBundle::new(&sys, 14.0, 4, &opts()).unwrap();
    let fit = ff1_coeffs_oracle(&sys, &bundle, &Vector::zeros(3), &random_controls(1, 5, &[0.0]));
    assert!(fit.b.abs() < 1e-12 && fit.c.abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ff1_constant_term_is_nonnegative(
        x in prop::collection::vec(-3.0f64..3.0, 3),
        u in prop::collection::vec(-3.0f64..3.0, 5),
        alpha in 0.1f64..4.0,
    ) {
        let sys = third_order();
        let bundle = RiccatiBundle::new(&sys, 14.0, 4, &opts()).unwrap();
        let x = Vector::from_vec(x);
        let us: Vec<Vector> = u.iter().map(|v| v1(*v)).collect();
        let fit = ff1_coeffs_oracle(&sys, &bundle, &x, &us);
        prop_assert!(fit.c >= -1e-9 * (1.0 + fit.c.abs()));
        // Degrees of homogeneity.
        let xs = &x * alpha;
        let uss: Vec<Vector> = us.iter().map(|u| u * alpha).collect();
        let scaled = ff1_coeffs_oracle(&sys, &bundle, &xs, &uss);
        let tol = 1e-8 * (fit.a.abs() + fit.b.abs() + fit.c.abs()) * alpha * alpha;
        prop_assert!((scaled.a - fit.a).abs() <= tol);
        prop_assert!((scaled.b - alpha * fit.b).abs() <= tol);
        prop_assert!((scaled.c - alpha * alpha * fit.c).abs() <= tol);
    }
}

fn check_soundness(sys: &SystemModel, cfg: &AdversaryConfig, v: &AdversaryVerdict) {
    match v.outcome {
        Outcome::AttenuationViolated { .. } => {
            let mut buf = Vec::new();
            write_trace_csv(&v.trace, &mut buf).unwrap();
            let back = read_trace_csv(sys, buf.as_slice()).unwrap();
            let z2: f64 = back.rows.iter().map(|r| r.stage_z2).sum();
            let w2: f64 = back.rows.iter().map(|r| r.stage_w2).sum();
            assert!(z2 - cfg.gamma * cfg.gamma * w2 > 0.0);
            assert!(z2 / w2 > cfg.gamma * cfg.gamma);
        }
        Outcome::RateAtLeastInverseH { rate, probe_failures, delta_bound } => {
            assert!(rate >= 1.0 / cfg.h as f64 - 1e-3);
            assert!((probe_failures as u64) < delta_bound);
        }
        Outcome::InconclusiveAtHorizon { .. } => {}
    }
}

#[test]
fn deadband_run_violates_attenuation() {
    let sys = scalar();
    let cfg = AdversaryConfig::new(&sys, GAMMA, 1, v1(1.0), 0.1, 0.03, &opts()).unwrap();
    let v = run_adversary(&sys, &mut deadband_pair(), &cfg).unwrap();
    assert_eq!(v.outcome.name(), "attenuation_violated");
    assert!((v.ratio / 2.2091 - 1.0).abs() < 0.05, "ratio {}", v.ratio);
    check_soundness(&sys, &cfg, &v);
    let term = v.terminal.unwrap();
    assert!((term.value_q - term.value_pbar).abs() < 0.5 * term.eta);
    // The realized tail from the terminal transmission is at least the ladder value.
    let g2 = GAMMA * GAMMA;
    let tail: f64 = v.trace.rows[term.t..].iter().map(|r| r.stage_z2 - g2 * r.stage_w2).sum();
    assert!(tail >= term.value_q - 1e-9 * term.value_q.abs().max(1.0), "{tail} vs {}", term.value_q);
    // Every kick sits on the side of the ε-set selected by the sign of b.
    for e in &v.eps_events {
        assert!(e.coeffs.b * e.eps >= -1e-9 * (e.coeffs.a.abs() + e.coeffs.c.abs()));
        assert!(e.eps == e.set.inf || e.eps == e.set.sup);
        assert!(e.eps.abs() >= cfg.eps_low - 1e-5);
    }
}

#[test]
fn threshold_run_violates_attenuation() {
    let sys = scalar();
    let cfg = AdversaryConfig::new(&sys, GAMMA, 1, v1(1.0), 0.1, 0.03, &opts()).unwrap();
    let v = run_adversary(&sys, &mut threshold_pair(), &cfg).unwrap();
    assert_eq!(v.outcome.name(), "attenuation_violated");
    assert!((v.ratio / 2.2726 - 1.0).abs() < 0.05, "ratio {}", v.ratio);
    check_soundness(&sys, &cfg, &v);
}

#[test]
fn optimal_periodic_pair_keeps_inverse_h_rate() {
    let sys = scalar();
    // γ strictly between the periodic levels for h = 1 and h = 2.
    let mut cfg = AdversaryConfig::new(&sys, 1.7, 1, v1(1.0), 0.1, 0.03, &opts()).unwrap();
    cfg.horizon_cap = 2000;
    let mut p = pair(&sys, ControllerSpec::Hold { k: None, gamma: Some(1.7) }, SchedulerSpec::Periodic { h: 1 });
    let v = run_adversary(&sys, &mut p, &cfg).unwrap();
    match v.outcome {
        Outcome::RateAtLeastInverseH { rate, probe_failures, .. } => {
            assert_eq!(rate, 1.0);
            assert_eq!(probe_failures, 0);
        }
        ref other => panic!("{other:?}"),
    }
    // The initial step is never a transmission, so the full-horizon rate is (N − 1)/N.
    assert_eq!(v.rate, 1999.0 / 2000.0);
    check_soundness(&sys, &cfg, &v);
}

#[test]
fn periodic_two_keeps_half_rate() {
    let sys = scalar();
    let mut cfg = AdversaryConfig::new(&sys, 2.3, 2, v1(1.0), 0.1, 0.03, &opts()).unwrap();
    cfg.horizon_cap = 2000;
    let mut p = pair(&sys, ControllerSpec::GamePredictive { gamma_bar: 2.3 }, SchedulerSpec::Periodic { h: 2 });
    let v = run_adversary(&sys, &mut p, &cfg).unwrap();
    assert_eq!(v.outcome.name(), "rate_at_least_inverse_h", "{:?}", v.outcome);
    assert_eq!(v.tail_rate, 0.5);
    check_soundness(&sys, &cfg, &v);
}

#[test]
fn config_rejects_bad_inputs() {
    let sys = scalar();
    assert!(matches!(
        AdversaryConfig::new(&sys, GAMMA, 1, v1(0.0), 0.1, 0.03, &opts()),
        Err(Error::InvalidArgument(_))
    ));
    assert!(AdversaryConfig::new(&sys, GAMMA, 1, v1(1.0), 0.01, 0.03, &opts()).is_err());
    assert!(matches!(
        AdversaryConfig::new(&sys, GAMMA, 1, Vector::zeros(2), 0.1, 0.03, &opts()),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        AdversaryConfig::new(&sys, 1.7, 2, v1(1.0), 0.1, 0.03, &opts()),
        Err(Error::AssumptionFourViolated { .. })
    ));
    let cfg = AdversaryConfig::new(&sys, GAMMA, 1, v1(1.0), 0.1, 0.03, &opts()).unwrap();
    let expected = (cfg.bundle.gap()[(0, 0)] / (-cfg.bundle.lambda_min * 0.03 * 0.03)).ceil() as u64;
    assert_eq!(cfg.delta_bound(), expected);
    assert_eq!(quad(&v1(1.0), &cfg.bundle.gap()), cfg.bundle.gap()[(0, 0)]);
}

fn a5(p: &mut PolicyPair, gamma: f64) -> A5Report {
    let sys = scalar();
    let bundle = RiccatiBundle::new(&sys, gamma, 1, &opts()).unwrap();
    check_assumption5(&sys, p, &bundle, &v1(1.0), 0.03, &SampleSpec::default()).unwrap()
}

#[test]
fn uniform_margin_check() {
    let mut gt = pair(&scalar(), ControllerSpec::GamePredictive { gamma_bar: GAMMA }, game_trigger(GAMMA));
    let r = a5(&mut gt, GAMMA);
    assert!(r.long_gaps > 0);
    assert_eq!(r.violations.len(), r.long_gaps);
    assert_eq!(gt.time(), 0);

    // Probing at a slightly larger level leaves the manifold, so every gap is one step.
    let r = a5(&mut gt, 1.48);
    assert_eq!(r.long_gaps, 0);
    assert!(r.violations.is_empty());

    let r = a5(&mut deadband_pair(), GAMMA);
    assert!(r.long_gaps > 0);
    assert!(r.violations.is_empty());

    let mut per =
        pair(&scalar(), ControllerSpec::Hold { k: None, gamma: Some(GAMMA) }, SchedulerSpec::Periodic { h: 2 });
    let r = a5(&mut per, GAMMA);
    assert!(r.long_gaps > 0 && r.long_gaps < r.samples);
    assert!(r.violations.is_empty());
    let mut per1 =
        pair(&scalar(), ControllerSpec::Hold { k: None, gamma: Some(GAMMA) }, SchedulerSpec::Periodic { h: 1 });
    let r = a5(&mut per1, GAMMA);
    assert_eq!(r.long_gaps, 0);
}
