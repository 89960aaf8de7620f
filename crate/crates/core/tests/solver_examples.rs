use selfsim::dynamics::{Branch, ModelParams};
use selfsim::shooting::ShootConfig;
use selfsim::solver::{
    find_x0_star, log_grid, match_plus, residual_minus, sign_change_brackets, solve_pair, sweep_branches,
    trace_map_minus, BranchEvent, SearchConfig, SimilaritySolution, SolutionKind,
};

fn minus(m: f64) -> ModelParams {
    ModelParams::new(m, Branch::Minus).unwrap()
}

fn plus(m: f64) -> ModelParams {
    ModelParams::new(m, Branch::Plus).unwrap()
}

fn x_q(m: f64) -> f64 {
    (2.0 / (m + 1.0)).sqrt()
}

fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[test]
fn residual_vanishes_on_the_exact_orbit() {
    let cfg = ShootConfig::default();
    let r = residual_minus(&minus(3.0), x_q(3.0), &cfg).unwrap();
    // u and w reach the corner together; the residual is the leftover size
    assert!(r.abs() < 1e-2, "{r}");
    let lo = residual_minus(&minus(3.0), 0.74, &cfg).unwrap();
    let hi = residual_minus(&minus(3.0), 0.80, &cfg).unwrap();
    assert!(lo * hi < 0.0, "{lo} {hi}");
}

#[test]
fn roots_in_reference_brackets() {
    let cfg = ShootConfig::default();
    let r = find_x0_star(&minus(3.0), (0.71, 0.82), &cfg).unwrap();
    assert!((r.x0_star - 0.767).abs() < 5e-3 && (r.a_minus - 0.129).abs() < 5e-3, "{r:?}");
    let r = find_x0_star(&minus(4.0), (1.0, 1.3), &cfg).unwrap();
    assert!((r.x0_star - 1.165).abs() < 5e-3 && (r.a_minus - 0.386).abs() < 5e-3, "{r:?}");
    let r = find_x0_star(&minus(2.0), (0.30, 0.37), &cfg).unwrap();
    assert!((r.x0_star - 0.338).abs() < 5e-3 && ((r.a_minus + 2.804) / 2.804).abs() < 5e-2, "{r:?}");
    assert!((r.hi - r.lo) <= 1e-13 * r.hi);
}

#[test]
fn root_is_stable_under_tighter_tolerances() {
    let base = ShootConfig::default();
    let tight = ShootConfig { integ: base.integ.scaled_tolerances(0.1), ..base };
    for (m, bracket) in [(3.0, (0.71, 0.82)), (2.0, (0.12, 0.16))] {
        let a = find_x0_star(&minus(m), bracket, &base).unwrap().x0_star;
        let b = find_x0_star(&minus(m), bracket, &tight).unwrap().x0_star;
        assert!((a - b).abs() < 1e-6, "m={m}: {a} vs {b}");
    }
}

#[test]
fn bracket_without_sign_change_is_rejected() {
    assert!(find_x0_star(&minus(3.0), (0.9, 1.1), &ShootConfig::default()).is_err());
}

#[test]
fn m3_trace_has_two_boundaries() {
    let trace = trace_map_minus(&minus(3.0), &linear_grid(0.4, 1.2, 200), &ShootConfig::default()).unwrap();
    let brackets = sign_change_brackets(&trace);
    assert_eq!(brackets.len(), 2, "{brackets:?}");
    assert!(brackets[0].0 <= x_q(3.0) && x_q(3.0) <= brackets[0].1);
    assert!(brackets[1].0 <= 0.767 && 0.767 <= brackets[1].1);
    assert!(trace.windows(2).all(|w| w[1].sweep_var() > w[0].sweep_var()));
}

#[test]
fn m2_trace_has_reference_boundaries() {
    // the grid reaches past x_Q so the stationary boundary is inside it
    let trace = trace_map_minus(&minus(2.0), &log_grid(0.03, 0.9, 400), &ShootConfig::default()).unwrap();
    let brackets = sign_change_brackets(&trace);
    assert!(brackets.len() >= 4, "{brackets:?}");
    for x in [0.338, 0.137, x_q(2.0)] {
        assert!(brackets.iter().any(|b| b.0 <= x * 1.02 && x * 0.98 <= b.1), "no boundary near {x}");
    }
}

#[test]
fn empty_grid_traces_to_nothing() {
    assert!(trace_map_minus(&minus(3.0), &[], &ShootConfig::default()).unwrap().is_empty());
}

#[test]
fn matching_reference_targets() {
    let cfg = ShootConfig::default();
    let a = match_plus(&plus(3.0), 0.767, (0.01, 1.0), &cfg).unwrap();
    assert!((a - 0.154).abs() < 5e-3, "{a}");
    let a = match_plus(&plus(2.0), 0.137, (-100.0, -1.0), &cfg).unwrap();
    assert!(((a + 30.625) / 30.625).abs() < 5e-2, "{a}");
    // a target above x_Q cannot come from a negative A_plus
    assert!(match_plus(&plus(3.0), 0.767, (-10.0, -0.01), &cfg).is_err());
}

fn check_solution(s: &SimilaritySolution) {
    let xq = x_q(s.m);
    if s.rejected {
        assert!(s.a_minus * s.a_plus < 0.0);
        return;
    }
    match s.kind {
        SolutionKind::Reversing => assert!(s.a_minus > 0.0 && s.a_plus > 0.0 && s.x0_star > xq),
        SolutionKind::AntiReversing => assert!(s.a_minus < 0.0 && s.a_plus < 0.0 && s.x0_star < xq),
        SolutionKind::Stationary => assert!(s.a_minus == 0.0 && s.a_plus == 0.0),
    }
    for b in [Branch::Minus, Branch::Plus] {
        assert!(s.profile(b).is_strictly_increasing(), "{b:?} profile at m={}", s.m);
    }
    let ratio = s.far_field_ratio();
    assert!((ratio - 1.0).abs() < 2e-2, "far-field ratio {ratio} at m={} x0*={}", s.m, s.x0_star);
}

#[test]
fn m3_has_one_reversing_solution() {
    let sols = solve_pair(3.0, &SearchConfig::default()).unwrap();
    let moving: Vec<_> = sols.iter().filter(|s| s.kind != SolutionKind::Stationary).collect();
    assert_eq!(moving.len(), 1);
    let s = moving[0];
    assert_eq!(s.kind, SolutionKind::Reversing);
    assert!((s.x0_star - 0.767).abs() < 5e-3 && (s.a_minus - 0.129).abs() < 5e-3 && (s.a_plus - 0.154).abs() < 5e-3);
    sols.iter().for_each(check_solution);
}

#[test]
fn m2_and_m5_solutions_satisfy_pairing_and_matching() {
    let sols = solve_pair(2.0, &SearchConfig::default()).unwrap();
    let anti = sols.iter().filter(|s| s.kind == SolutionKind::AntiReversing).count();
    assert!(anti >= 3, "{anti} anti-reversing solutions");
    sols.iter().for_each(check_solution);

    let sols = solve_pair(5.0, &SearchConfig::default()).unwrap();
    let moving: Vec<_> = sols.iter().filter(|s| s.kind != SolutionKind::Stationary).collect();
    assert_eq!(moving.len(), 1);
    assert!((moving[0].x0_star - 1.666).abs() < 1e-2 && (moving[0].a_minus - 0.501).abs() < 1e-2);
    sols.iter().for_each(check_solution);
}

#[test]
fn stationary_branch_persists_across_m3() {
    let report = sweep_branches((2.9, 3.1), 0.05, &SearchConfig::default()).unwrap();
    for i in 0..=4 {
        let m = 2.9 + 0.05 * i as f64;
        let at_q = report
            .points
            .iter()
            .any(|p| (p.m - m).abs() < 1e-9 && p.a_minus == 0.0 && (p.x0_star - x_q(m)).abs() < 1e-12);
        assert!(at_q, "no stationary point at m={m}");
    }
    for label in report.labels() {
        let ms: Vec<f64> = report.branch(&label).iter().map(|p| p.m).collect();
        assert!(ms.windows(2).all(|w| ((w[1] - w[0]) - 0.05).abs() < 1e-9), "{label}: {ms:?}");
    }
}

#[test]
fn sweep_reports_departure_near_m5() {
    let report = sweep_branches((4.8, 5.2), 0.05, &SearchConfig::default()).unwrap();
    let born: Vec<f64> = report
        .events
        .iter()
        .filter_map(|e| match e {
            BranchEvent::Birth { onset_m, .. } if *onset_m > 4.8 => Some(*onset_m),
            _ => None,
        })
        .collect();
    let broken = report.events.iter().any(|e| matches!(e, BranchEvent::Break { m, .. } if (m - 5.0).abs() < 0.1));
    assert!(born.iter().any(|m| (m - 5.0).abs() < 0.1) || broken, "events {:?}", report.events);
}
