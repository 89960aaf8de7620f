use proptest::prelude::*;

use selfsim::integrator::{
    integrate, step_embedded, Direction, EventDirection, EventSpec, IntegrationConfig, IntegrationStatus, OdeProblem,
};

fn linear(lambda: f64, direction: Direction) -> OdeProblem<impl Fn(f64, &[f64], &mut [f64])> {
    OdeProblem::new(1, direction, move |_, y: &[f64], d: &mut [f64]| d[0] = lambda * y[0])
}

fn cfg(rtol: f64) -> IntegrationConfig {
    IntegrationConfig { rtol, atol: rtol * 1e-3, ..IntegrationConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_decay_matches_closed_form(lambda in -3.0..1.0_f64, y0 in 0.1..10.0_f64, t_end in 0.5..5.0_f64) {
        let c = cfg(1e-9);
        let out = integrate(&linear(lambda, Direction::Forward), &[y0], 0.0, t_end, &c, &[]).unwrap();
        let exact = y0 * (lambda * t_end).exp();
        prop_assert_eq!(&out.status, &IntegrationStatus::ReachedTEnd);
        prop_assert!(((out.last().1[0] - exact) / exact).abs() <= 10.0 * c.rtol * (1.0 + t_end));
    }

    #[test]
    fn local_error_is_fifth_order(lambda in -2.0..2.0_f64, h in 0.05..0.2_f64) {
        // halving the step cuts the one-step error by about 2^6 = 64
        let p = linear(lambda, Direction::Forward);
        let err = |h: f64| (step_embedded(&p, 0.0, &[1.0], h).unwrap().y_high[0] - (lambda * h).exp()).abs();
        let (e1, e2) = (err(h), err(h / 2.0));
        prop_assume!(e2 > 1e-15);
        let ratio = e1 / e2;
        prop_assert!(ratio > 40.0 && ratio < 90.0, "ratio {}", ratio);
    }

    #[test]
    fn backward_run_retraces_forward_run(t_end in 0.5..6.0_f64, phase in 0.0..6.0_f64) {
        let osc = |d: Direction| OdeProblem::new(2, d, |_, y: &[f64], o: &mut [f64]| { o[0] = y[1]; o[1] = -y[0]; });
        let c = cfg(1e-10);
        let y0 = [phase.cos(), -phase.sin()];
        let fwd = integrate(&osc(Direction::Forward), &y0, 0.0, t_end, &c, &[]).unwrap();
        let (_, y1) = fwd.last();
        let back = integrate(&osc(Direction::Backward), y1, t_end, 0.0, &c, &[]).unwrap();
        let (t0, y) = back.last();
        prop_assert!(t0.abs() < 1e-12);
        prop_assert!((y[0] - y0[0]).abs() < 1e-8 && (y[1] - y0[1]).abs() < 1e-8);
    }

    #[test]
    fn event_on_exponential_lands_on_log(lambda in 0.2..3.0_f64, level in 1.5..50.0_f64) {
        let ev = EventSpec::new("level", EventDirection::Increasing, true, move |_, y: &[f64]| y[0] - level);
        let out = integrate(&linear(lambda, Direction::Forward), &[1.0], 0.0, 100.0, &cfg(1e-10), &[ev]).unwrap();
        let IntegrationStatus::EventHit(rec) = out.status else { panic!("no event") };
        prop_assert!((rec.t - level.ln() / lambda).abs() < 1e-9);
        prop_assert!((rec.y[0] - level).abs() < 1e-8 * level);
    }

    #[test]
    fn dense_output_tracks_solution(lambda in -2.0..0.5_f64, frac in 0.0..1.0_f64) {
        let out = integrate(&linear(lambda, Direction::Forward), &[1.0], 0.0, 4.0, &cfg(1e-10), &[]).unwrap();
        let t = 4.0 * frac;
        let y = out.dense(t).unwrap();
        prop_assert!((y[0] - (lambda * t).exp()).abs() < 1e-6);
    }
}

#[test]
fn event_direction_filters_crossings() {
    let osc = OdeProblem::new(2, Direction::Forward, |_, y: &[f64], o: &mut [f64]| {
        o[0] = y[1];
        o[1] = -y[0];
    });
    let ev = EventSpec::new("rise", EventDirection::Increasing, true, |_, y: &[f64]| y[0]);
    let out = integrate(&osc, &[1.0, 0.0], 0.0, 10.0, &cfg(1e-10), &[ev]).unwrap();
    let IntegrationStatus::EventHit(rec) = out.status else { panic!("no event") };
    // cos t crosses zero downward at pi/2, upward at 3 pi/2
    assert!((rec.t - 1.5 * std::f64::consts::PI).abs() < 1e-9);
}
