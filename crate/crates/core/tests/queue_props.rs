use aud_core::dist::{ArrivalModel, Family};
use aud_core::queue::{self, *};
use proptest::prelude::*;

const RHO_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// One model per family, rescaled to arrival rate `lambda`.
fn models_at(lambda: f64) -> Vec<ArrivalModel> {
    [
        ArrivalModel::exponential(1.0).unwrap(),
        ArrivalModel::uniform(2.0).unwrap(),
        ArrivalModel::lomax(3.0, 2.0).unwrap(),
        ArrivalModel::folded_normal(1.0, 0.3).unwrap(),
        ArrivalModel::deterministic(1.0).unwrap(),
    ]
    .iter()
    .map(|m| m.with_rate(lambda).unwrap())
    .collect()
}

#[test]
fn fixed_point_residual_all_families() {
    let mu = 2.0;
    for rho in RHO_GRID {
        for m in models_at(rho * mu) {
            let s = solve_rho1(&m, mu, RHO1_TOL, RHO1_MAX_ITER).unwrap();
            let residual = (s.rho1 - m.laplace(mu * (1.0 - s.rho1)).unwrap()).abs();
            assert!(residual <= 1e-12, "{m} rho={rho}: {residual}");
            assert!(s.rho1 > 0.0 && s.rho1 < 1.0);
        }
    }
}

#[test]
fn exponential_fixed_point_is_load() {
    for rho in RHO_GRID {
        let m = ArrivalModel::exponential(rho).unwrap();
        let r = solve_rho1(&m, 1.0, RHO1_TOL, RHO1_MAX_ITER).unwrap().rho1;
        // exact root is rho; error is the residual divided by (1 - rho)
        assert!((r - rho).abs() < 1e-12 / (1.0 - rho) * 2.0, "{rho}: {r}");
    }
}

#[test]
fn lambert_identity_on_log_grid() {
    let branch = -1.0 / std::f64::consts::E;
    let mut xs: Vec<f64> = (0..=60).map(|i| -(10f64.powf(-10.0 + i as f64 * 0.1666))).collect();
    xs.retain(|&x| x >= branch + 1e-9);
    xs.push(branch + 1e-9);
    xs.extend((0..=100).map(|i| 10f64.powf(-12.0 + i as f64 * 0.18)));
    for x in xs {
        let w = lambert_w0(x).unwrap();
        assert!(w >= -1.0);
        let err = (w * w.exp() - x).abs();
        assert!(err <= 1e-12 * x.abs().max(1.0), "x={x}: w={w}, err={err}");
    }
}

#[test]
fn lambert_and_fixed_point_agree() {
    for rho in RHO_GRID {
        let closed = rho1_deterministic(rho).unwrap();
        let m = ArrivalModel::deterministic(1.0).unwrap();
        let iter = solve_rho1(&m, 1.0 / rho, RHO1_TOL, RHO1_MAX_ITER).unwrap().rho1;
        assert!((closed - iter).abs() <= 1e-9, "rho={rho}: {closed} vs {iter}");
    }
}

#[test]
fn rho1_small_load_limit() {
    assert!(rho1_deterministic(0.01).unwrap() < 1e-40);
    assert!(rho1_deterministic(0.05).unwrap() < 1e-7);
}

#[test]
fn mm1m_pipeline_consistency() {
    for (lambda, mu) in [(1.0, 2.0), (0.3, 1.0), (2.5, 3.0), (0.01, 5.0)] {
        let m = ArrivalModel::exponential(lambda).unwrap();
        let r1 = solve_rho1(&m, mu, RHO1_TOL, RHO1_MAX_ITER).unwrap().rho1;
        let d = departure_moments(&m, mu, r1).unwrap();
        let via = average_aud_from_moments(d.mean, d.second, d.cross);
        let closed = average_aud_mm1m(lambda, mu).unwrap();
        assert!((via - closed).abs() <= 1e-9 * closed.max(1.0), "{lambda},{mu}: {via} vs {closed}");
    }
}

#[test]
fn dm1m_pipeline_consistency() {
    for (lambda, mu) in [(1.0, 2.0), (0.3, 1.0), (2.5, 3.0)] {
        let m = ArrivalModel::deterministic(1.0 / lambda).unwrap();
        let r1 = queue::rho1(&m, mu).unwrap();
        let d = departure_moments(&m, mu, r1).unwrap();
        let via = average_aud_from_moments(d.mean, d.second, d.cross);
        let closed = average_aud_dm1m(lambda, mu).unwrap();
        assert!((via - closed).abs() <= 1e-12 * closed, "{via} vs {closed}");
    }
}

#[test]
fn sync_decreases_toward_dm1m() {
    for (lambda, mu) in [(1.0, 2.0), (1.035, 2.0), (0.2, 1.0)] {
        let dm1m = average_aud_dm1m(lambda, mu).unwrap();
        let vals: Vec<f64> = (1..=10)
            .map(|m0| average_aud_dm1d_sync(lambda, mu, m0).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
        for m0 in [100, 1000, 10_000] {
            let v = average_aud_dm1d_sync(lambda, mu, m0).unwrap();
            assert!(v > dm1m);
            assert!(v - dm1m <= 1.0 / (m0 as f64 * lambda), "m0={m0}");
        }
    }
}

#[test]
fn offset_curve_is_convex() {
    for (lambda, mu) in [(1.0, 2.0), (1.035, 2.0), (0.5, 2.0), (0.2, 1.0)] {
        let p = 1.0 / lambda;
        let ys: Vec<f64> = (1..=50)
            .map(|i| average_aud_dm1d_offset(lambda, mu, p * i as f64 / 51.0).unwrap())
            .collect();
        for w in ys.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-8);
        }
    }
}

#[test]
fn offset_curve_loses_convexity_at_heavy_load() {
    let (lambda, mu) = (0.9, 1.0);
    let ys: Vec<f64> = (1..=50)
        .map(|i| average_aud_dm1d_offset(lambda, mu, i as f64 / 51.0 / lambda).unwrap())
        .collect();
    let min_second = ys
        .windows(3)
        .map(|w| w[0] - 2.0 * w[1] + w[2])
        .fold(f64::INFINITY, f64::min);
    assert!(min_second < -1e-4, "{min_second}");
}

#[test]
fn phi_sign_matches_numerical_derivative() {
    let (lambda, mu) = (1.0, 2.0);
    let rho = lambda / mu;
    let rho1 = rho1_deterministic(rho).unwrap();
    let rho0 = (-mu / lambda).exp();
    let h = 1e-6;
    for i in 1..=20 {
        let delta = i as f64 / 21.0;
        let fd = (average_aud_dm1d_offset(lambda, mu, delta + h).unwrap()
            - average_aud_dm1d_offset(lambda, mu, delta - h).unwrap())
            / (2.0 * h);
        let u1 = (-mu * (1.0 - rho1) * delta).exp();
        let phi = offset_derivative_phi(rho, rho0, rho1, u1);
        assert_eq!(fd.signum(), phi.signum(), "delta={delta}: fd={fd}, phi={phi}");
        // the positive factor relating the two parametrizations is 1
        assert!((fd - phi).abs() < 1e-6, "delta={delta}: fd={fd}, phi={phi}");
    }
}

#[test]
fn phi_small_at_grid_minimum() {
    let (lambda, mu) = (1.0, 2.0);
    let rho1 = rho1_deterministic(0.5).unwrap();
    let n = 10_000;
    let (best, _) = (1..n)
        .map(|i| {
            let d = i as f64 / n as f64;
            (d, average_aud_dm1d_offset(lambda, mu, d).unwrap())
        })
        .fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let u1 = (-mu * (1.0 - rho1) * best).exp();
    let phi = offset_derivative_phi(0.5, (-2.0f64).exp(), rho1, u1);
    // |phi| <= (max curvature) * grid step
    assert!(phi.abs() < 10.0 / n as f64, "{phi}");
}

#[test]
fn reference_constants() {
    let rho1 = rho1_deterministic(0.5).unwrap();
    assert!((rho1 - 0.2032).abs() < 5e-5);
    assert!(((-2.0f64).exp() - 0.1353).abs() < 5e-5);
    assert!((stationary_queue_pmf(0.2032, 1) - 0.161_909_76).abs() < 1e-6);
    assert!((1.0 / system_time_rate(2.0, 0.2032) - 0.627_510).abs() < 1e-6);
}

#[test]
fn example_values() {
    assert!((average_aud_dm1d_offset(1.0, 2.0, 0.5).unwrap() - 1.0846).abs() < 1e-4);
    assert!((missing_prob_dm1d_sync(1.0, 2.0, 1).unwrap() - 0.54124).abs() < 1e-5);
    let p: Vec<f64> = (1..=10).map(|m0| missing_prob_dm1d_sync(1.0, 2.0, m0).unwrap()).collect();
    assert!(p.windows(2).all(|w| w[1] < w[0]), "{p:?}");
    let m = ArrivalModel::exponential(1.0).unwrap();
    assert!((missing_prob_gm1m(&m, 2.0, 1.0).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn missing_prob_limits() {
    for m in models_at(1.0) {
        let p = missing_prob_gm1m(&m, 2.0, 1e6).unwrap();
        assert!(p < 1e-5, "{m}: {p}");
    }
}

#[test]
fn missing_prob_continuous_through_singularity() {
    for m in models_at(1.0) {
        let mu = 2.0;
        let r = system_time_rate(mu, queue::rho1(&m, mu).unwrap());
        let at = missing_prob_gm1m(&m, mu, r).unwrap();
        let offsets = [-3e-3, -1.5e-3, -1e-4, 1e-4, 1.5e-3, 3e-3];
        for d in offsets {
            let p = missing_prob_gm1m(&m, mu, r + d).unwrap();
            // slope of p in nu is O(1), so values stay within a few |d|
            assert!((p - at).abs() < 2.0 * d.abs(), "{m} d={d}: {p} vs {at}");
        }
        let left = missing_prob_gm1m(&m, mu, r - 1.01e-3 * mu).unwrap();
        let right = missing_prob_gm1m(&m, mu, r + 1.01e-3 * mu).unwrap();
        let mid = 0.5 * (left + right);
        assert!((mid - at).abs() < 1e-5, "{m}: {mid} vs {at}");
    }
}

fn arb_family() -> impl Strategy<Value = Family> {
    prop_oneof![
        Just(Family::Exponential),
        Just(Family::Uniform),
        Just(Family::Lomax),
        Just(Family::FoldedNormal),
        Just(Family::Deterministic),
    ]
}

fn model(family: Family, lambda: f64, shape: f64) -> ArrivalModel {
    let base = match family {
        Family::Exponential => ArrivalModel::exponential(1.0),
        Family::Uniform => ArrivalModel::uniform(2.0),
        Family::Lomax => ArrivalModel::lomax(2.0 + shape, 1.0),
        Family::FoldedNormal => ArrivalModel::folded_normal(1.0, shape),
        Family::Deterministic => ArrivalModel::deterministic(1.0),
    };
    base.unwrap().with_rate(lambda).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_in_unit_interval(
        family in arb_family(),
        rho in 0.02f64..0.97,
        mu in 0.1f64..10.0,
        nu_ratio in 0.01f64..100.0,
        shape in 0.05f64..5.0,
    ) {
        let m = model(family, rho * mu, shape);
        let r1 = queue::rho1(&m, mu).unwrap();
        prop_assert!(r1 >= 0.0 && r1 < 1.0);
        let p = missing_prob_gm1m(&m, mu, nu_ratio * rho * mu).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let d = departure_moments(&m, mu, r1).unwrap();
        prop_assert!(d.second >= d.mean * d.mean * (1.0 - 1e-9));
        prop_assert!(average_aud_from_moments(d.mean, d.second, d.cross) > 0.0);
    }

    #[test]
    fn deterministic_closed_forms_in_range(rho in 0.02f64..0.98, mu in 0.1f64..10.0, m0 in 1u32..50) {
        let lambda = rho * mu;
        let p = missing_prob_dm1d_sync(lambda, mu, m0).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let sync = average_aud_dm1d_sync(lambda, mu, m0).unwrap();
        let dm1m = average_aud_dm1m(lambda, mu).unwrap();
        prop_assert!(sync > dm1m);
    }

    #[test]
    fn lambert_identity(x in -0.367_879_44f64..1e6) {
        let w = lambert_w0(x).unwrap();
        prop_assert!((w * w.exp() - x).abs() <= 1e-12 * x.abs().max(1.0));
    }
}
