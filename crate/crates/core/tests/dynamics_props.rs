use proptest::prelude::*;

use selfsim::dynamics::{
    energy, exact_far_residual, exact_near_residual, far_rhs, far_to_near, near_rhs, near_to_far, Branch, CenterSeries,
    FarState, ModelParams, NearState,
};

fn branch() -> impl Strategy<Value = Branch> {
    prop_oneof![Just(Branch::Minus), Just(Branch::Plus)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn near_far_round_trip(m in 1.2..6.0_f64, br in branch(), xi in -5.0..5.0_f64, u in 1e-3..1e3_f64, w in -5.0..5.0_f64) {
        let pr = ModelParams::new(m, br).unwrap();
        let s = NearState::new(xi, u, w);
        let back = far_to_near(&pr, near_to_far(&pr, s).unwrap()).unwrap();
        for (a, b) in [(s.xi, back.xi), (s.u, back.u), (s.w, back.w)] {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300) + 1e-300, "{} vs {}", a, b);
        }
    }

    #[test]
    fn energy_rate_along_plus_field(m in 1.5..5.0_f64, xi in -3.0..3.0_f64, u in 0.01..3.0_f64, w in -3.0..3.0_f64) {
        // directional derivative of E along the field by central differences
        let pr = ModelParams::new(m, Branch::Plus).unwrap();
        let s = NearState::new(xi, u, w);
        let f = near_rhs(&pr, s).unwrap();
        let h = 1e-5;
        let shifted = |k: f64| energy(&pr, NearState::new(xi + k * f.xi, u + k * f.u, w + k * f.w)).0;
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let exact = -pr.p() * xi * w * w;
        prop_assert!((fd - exact).abs() <= 1e-6 * (1.0 + exact.abs()), "{} vs {}", fd, exact);
    }

    #[test]
    fn exact_solutions_solve_both_systems(m in 1.5..6.0_f64, br in branch(), a in 0.05..3.0_f64, frac in -0.9..0.9_f64) {
        let pr = ModelParams::new(m, br).unwrap();
        prop_assert!(exact_near_residual(&pr, a, frac / a).unwrap() < 1e-9);
        prop_assert!(exact_far_residual(&pr, a, frac / a).unwrap() < 1e-9);
    }

    #[test]
    fn series_is_tangent_to_flow(m in 2.0..5.0_f64, br in branch(), x0 in 0.3..2.0_f64) {
        // a z^5 error in the order-4 point tilts the field by z^5 against z' ~ z^2
        let pr = ModelParams::new(m, br).unwrap();
        let series = CenterSeries::new(&pr, x0);
        let misalign = |z: f64| {
            let p = series.point(z, 4);
            let t = series.tangent(z, 4);
            let f = far_rhs(&pr, p).unwrap();
            let fx = f.x - t.x * f.z;
            let fy = f.y - t.y * f.z;
            fx.abs().max(fy.abs()) / f.z.abs()
        };
        let (e1, e2) = (misalign(1e-2), misalign(5e-3));
        let ratio = e1 / e2;
        prop_assert!(ratio > 6.0 && ratio < 12.0, "{} {} ratio {}", e1, e2, ratio);
    }

    #[test]
    fn branches_differ_only_by_sign_terms(m in 1.5..5.0_f64, x in 0.1..3.0_f64, y in 0.01..2.0_f64, z in -1.0..1.0_f64) {
        let s = FarState::new(x, y, z);
        let fm = far_rhs(&ModelParams::new(m, Branch::Minus).unwrap(), s).unwrap();
        let fp = far_rhs(&ModelParams::new(m, Branch::Plus).unwrap(), s).unwrap();
        prop_assert_eq!(fm.x, fp.x);
        prop_assert_eq!(fm.y, fp.y);
        // z' carries sigma (y - p x z) with sigma = -1 / +1
        let p = (m + 1.0) / 2.0;
        let diff = fp.z - fm.z;
        prop_assert!((diff - 2.0 * (y - p * x * z)).abs() <= 1e-12 * (1.0 + diff.abs()));
    }
}
