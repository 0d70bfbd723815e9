use aud_core::queue::{
    analyze, average_aud_dm1d_sync, average_aud_dm1m, missing_prob_dm1d_sync, rho1, DerivedQuantities,
    SystemConfig,
};
use aud_core::sim::*;
use aud_core::AudError;
use proptest::prelude::*;

fn config(arrival: &str, mu: f64, decision: &str) -> SystemConfig {
    SystemConfig::parse(arrival, mu, decision).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Exact mean AuD of D/M/1 with a decision `delta` after every arrival.
///
/// An arrival finds `L ~ Geometric(rho1)` updates in the system. By the
/// decision epoch `P ~ Poisson(mu delta)` service completions could have
/// occurred, so `R = max(L + 1 - P, 0)` updates of the `L + 1` are still
/// waiting; the freshest departed update arrived `R` periods before the
/// current one.
fn exact_offset_aud(lambda: f64, mu: f64, delta: f64) -> f64 {
    let r1 = rho1(&"det:period=1".parse().unwrap(), mu / lambda).unwrap();
    let m = mu * delta;
    let mut pois = vec![(-m).exp()];
    for p in 1..4000 {
        let prev = pois[p - 1];
        pois.push(prev * m / p as f64);
    }
    let mut expected_r = 0.0;
    let mut pl = 1.0 - r1;
    for l in 0..4000usize {
        let n = l + 1;
        let remaining: f64 = (0..n).map(|p| (n - p) as f64 * pois[p]).sum();
        expected_r += pl * remaining;
        pl *= r1;
        if pl < 1e-18 {
            break;
        }
    }
    delta + expected_r / lambda
}

#[test]
fn exact_offset_oracle_limits() {
    // instantaneous decisions after arrival: only earlier departures are visible
    let lambda = 1.0;
    let mu = 2.0;
    let r1 = rho1(&"det:period=1".parse().unwrap(), mu).unwrap();
    let tiny = exact_offset_aud(lambda, mu, 1e-9);
    assert!((tiny - 1.0 / (1.0 - r1)).abs() < 1e-6, "{tiny}");
}

#[test]
fn replay_is_bit_identical() {
    let c = config("exp:rate=1", 2.0, "poisson:rate=3");
    let a = run_replications(&c, 100_000, 4, 42).unwrap();
    let b = run_replications(&c, 100_000, 4, 42).unwrap();
    assert_eq!(a, b);
    let t1 = run_trajectory(&c, 5_000, 7).unwrap();
    let t2 = run_trajectory(&c, 5_000, 7).unwrap();
    assert_eq!(t1, t2);
    let other = run_trajectory(&c, 5_000, 8).unwrap();
    assert_ne!(t1.records, other.records);
}

#[test]
fn report_is_independent_of_thread_count() {
    let c = config("uniform:beta=2", 2.0, "poisson:rate=1");
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_replications(&c, 50_000, 6, 3).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn trajectory_matches_replication_zero() {
    let c = config("lomax:alpha=4,beta=3", 2.0, "poisson:rate=2");
    let h = 20_000;
    let t = run_trajectory(&c, h, 11).unwrap();
    let s = replication_stats(&c, h, 11, 0).unwrap();
    let k0 = first_retained(h);
    let kept: Vec<_> = t.decisions.iter().filter(|d| d.used_update >= k0).collect();
    assert_eq!(kept.len() as u64, s.decisions);
    let sum: f64 = kept.iter().map(|d| d.aud).sum();
    assert!((sum - s.sum_aud).abs() <= 1e-9 * sum);
    let p = estimate_missing_prob(&t.records, &t.decisions).unwrap();
    assert!((p - s.missed as f64 / s.counted as f64).abs() < 1e-15);
    assert_eq!(s.warmup_updates, k0 - 1);
}

fn check_trajectory(t: &Trajectory) -> std::result::Result<(), TestCaseError> {
    let mut prev_sys = 0.0;
    let mut prev_dep = 0.0;
    for r in &t.records {
        let scale = r.departure.max(1.0) * 1e-12;
        prop_assert!((r.system_time - (r.wait + r.service)).abs() <= scale);
        prop_assert!((r.departure - (r.arrival + r.system_time)).abs() <= scale);
        prop_assert!(r.wait >= 0.0 && r.service > 0.0);
        prop_assert!(r.inter_departure >= 0.0);
        prop_assert!((r.inter_departure - (r.departure - prev_dep)).abs() <= scale);
        if r.k > 1 {
            if r.inter_arrival < prev_sys {
                prop_assert!((r.inter_departure - r.service).abs() <= scale);
            } else {
                let y = r.inter_arrival + r.service - prev_sys;
                prop_assert!((r.inter_departure - y).abs() <= scale);
            }
        }
        prev_sys = r.system_time;
        prev_dep = r.departure;
    }
    let deps: Vec<f64> = t.records.iter().map(|r| r.departure).collect();
    prop_assert!(deps.windows(2).all(|w| w[0] <= w[1]));
    for d in &t.decisions {
        // latest update departed at or before the decision epoch
        let n = deps.partition_point(|&x| x <= d.epoch) as u64;
        prop_assert_eq!(d.used_update, n);
        let arrival = t.records[(n - 1) as usize].arrival;
        prop_assert!((d.aud - (d.epoch - arrival)).abs() <= 1e-12 * d.epoch.max(1.0));
        prop_assert!(d.aud > 0.0);
    }
    prop_assert!(t.decisions.windows(2).all(|w| w[0].epoch <= w[1].epoch && w[1].j == w[0].j + 1));
    if let Some(first) = t.decisions.first() {
        prop_assert_eq!(first.j, t.before_first_departure + 1);
    }
    Ok(())
}

fn arb_config() -> impl Strategy<Value = SystemConfig> {
    let mu = 0.5f64..5.0;
    let rho = 0.05f64..0.95;
    let continuous = (
        prop_oneof![
            Just("exp:rate=1"),
            Just("uniform:beta=2"),
            Just("lomax:alpha=2.5,beta=1.5"),
            Just("fnorm:alpha=1,sigma=0.4"),
            Just("det:period=1"),
        ],
        rho.clone(),
        mu.clone(),
        0.05f64..10.0,
    )
        .prop_map(|(a, rho, mu, nu)| {
            let arrival = a.parse::<aud_core::dist::ArrivalModel>().unwrap().with_rate(rho * mu).unwrap();
            SystemConfig::parse(&arrival.to_string(), mu, &format!("poisson:rate={nu}")).unwrap()
        });
    let sync = (rho.clone(), mu.clone(), 1u32..8).prop_map(|(rho, mu, m0)| {
        config(&format!("det:period={}", 1.0 / (rho * mu)), mu, &format!("sync:m0={m0}"))
    });
    let offset = (rho, mu, 0.01f64..0.99).prop_map(|(rho, mu, f)| {
        let p = 1.0 / (rho * mu);
        config(&format!("det:period={p}"), mu, &format!("offset:delta={}", f * p))
    });
    prop_oneof![3 => continuous, 1 => sync, 1 => offset]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lindley_invariants_hold(c in arb_config(), seed in any::<u64>()) {
        let t = run_trajectory(&c, 3_000, seed).unwrap();
        prop_assert_eq!(t.records.len(), 3_000);
        check_trajectory(&t)?;
    }

    #[test]
    fn report_fields_are_in_range(c in arb_config(), seed in 0u64..1000) {
        let r = run_replications(&c, 5_000, 2, seed).unwrap();
        prop_assert!(r.mean_aud > 0.0);
        prop_assert!((0.0..=1.0).contains(&r.p_mis_hat));
        prop_assert!(r.aud_std_error >= 0.0 && r.p_mis_std_error >= 0.0);
        prop_assert!(r.aud_ci95.0 <= r.mean_aud && r.mean_aud <= r.aud_ci95.1);
        prop_assert_eq!(r.streams.clone(), vec![(0, 1), (2, 3)]);
        prop_assert_eq!(r.n_updates + r.warmup_discarded, 10_000);
    }
}

#[test]
fn poisson_aud_example() {
    let c = config("exp:rate=1", 2.0, "poisson:rate=3");
    let r = run_replications(&c, 1_000_000, 5, 1).unwrap();
    assert!(rel(r.mean_aud, 1.75) < 0.01, "{}", r.mean_aud);
}

#[test]
fn system_time_and_departure_moments() {
    // Lomax with shape 5 keeps the fourth moment finite, so E[Y^2] has a CLT
    for a in ["exp:rate=1", "uniform:beta=2", "lomax:alpha=5,beta=4", "fnorm:alpha=1,sigma=0.3", "det:period=1"] {
        let c = config(a, 2.0, "poisson:rate=1");
        let d = DerivedQuantities::compute(&c).unwrap();
        let r = run_replications(&c, 2_000_000, 5, 5).unwrap();
        assert!(rel(r.mean_system_time, d.mean_system_time) < 0.01, "{a} E[T]");
        assert!(rel(r.mean_y, d.departure.mean) < 0.01, "{a} E[Y]");
        assert!(rel(r.second_moment_y, d.departure.second) < 0.01, "{a} E[Y^2]");
        assert!(rel(r.cross_ty, d.departure.cross) < 0.01, "{a} E[TY]: {} vs {}", r.cross_ty, d.departure.cross);
    }
}

#[test]
fn busy_arrival_fraction_is_rho1() {
    for a in ["exp:rate=1", "uniform:beta=2", "fnorm:alpha=1,sigma=0.3", "det:period=1"] {
        let c = config(a, 2.0, "poisson:rate=1");
        let r1 = rho1(c.arrival(), 2.0).unwrap();
        let fractions: Vec<f64> = (0..10)
            .map(|rep| {
                let s = replication_stats(&c, 200_000, 9, rep).unwrap();
                s.busy_arrivals as f64 / s.updates as f64
            })
            .collect();
        let (m, se) = mean_se(&fractions);
        assert!((m - r1).abs() <= 3.0 * se, "{a}: {m} vs {r1} (se {se})");
    }
}

#[test]
fn aud_does_not_depend_on_decision_rate() {
    let means: Vec<(f64, f64)> = [0.5, 1.0, 2.0, 5.0]
        .iter()
        .enumerate()
        .map(|(i, nu)| {
            let c = config("exp:rate=1", 2.0, &format!("poisson:rate={nu}"));
            let r = run_replications(&c, 1_000_000, 5, 100 + i as u64).unwrap();
            (r.mean_aud, r.aud_std_error)
        })
        .collect();
    for (i, a) in means.iter().enumerate() {
        for b in &means[i + 1..] {
            let pooled = (a.1 * a.1 + b.1 * b.1).sqrt();
            assert!((a.0 - b.0).abs() <= 3.0 * pooled, "{means:?}");
        }
    }
}

#[test]
fn confidence_interval_coverage() {
    let c = config("exp:rate=1", 2.0, "poisson:rate=1");
    let covered = (0..20)
        .filter(|&trial| {
            let r = run_replications(&c, 100_000, 20, 1000 + trial).unwrap();
            r.aud_ci95.0 <= 1.75 && 1.75 <= r.aud_ci95.1
        })
        .count();
    assert!(covered >= 18, "{covered}/20");
}

#[test]
fn standard_error_scales_with_horizon() {
    let c = config("exp:rate=1", 2.0, "poisson:rate=1");
    let short = run_replications(&c, 100_000, 40, 7).unwrap();
    let long = run_replications(&c, 200_000, 40, 8).unwrap();
    let ratio = short.aud_std_error / long.aud_std_error;
    let expected = 2f64.sqrt();
    assert!(ratio > expected / 1.5 && ratio < expected * 1.5, "{ratio}");
}

#[test]
fn missing_probability_examples() {
    let c = config("exp:rate=1", 2.0, "poisson:rate=1");
    let r = run_replications(&c, 2_000_000, 5, 21).unwrap();
    assert!((r.p_mis_hat - 0.5).abs() < 0.005, "{}", r.p_mis_hat);
    let c = config("exp:rate=1", 2.0, "poisson:rate=100");
    let r = run_replications(&c, 200_000, 2, 22).unwrap();
    assert!(r.p_mis_hat < 0.02, "{}", r.p_mis_hat);
}

#[test]
fn sync_short_gap_fraction_matches_closed_form() {
    // the synchronous closed form is the probability of an inter-departure
    // time shorter than the decision spacing
    for m0 in [1, 2, 5] {
        let c = config("det:period=1", 2.0, &format!("sync:m0={m0}"));
        let r = run_replications(&c, 2_000_000, 5, 30 + m0 as u64).unwrap();
        let p = missing_prob_dm1d_sync(1.0, 2.0, m0).unwrap();
        assert!(rel(r.short_y_fraction, p) < 0.01, "m0={m0}: {} vs {p}", r.short_y_fraction);
    }
}

#[test]
fn sync_aud_decreases_toward_dm1m() {
    let (lambda, mu) = (1.035, 2.0);
    let period = 1.0 / lambda;
    let mut prev = f64::INFINITY;
    for m0 in [1, 2, 5] {
        let c = config(&format!("det:period={period}"), mu, &format!("sync:m0={m0}"));
        let r = run_replications(&c, 1_000_000, 5, 40 + m0 as u64).unwrap();
        let exact = average_aud_dm1d_sync(lambda, mu, m0).unwrap();
        assert!(rel(r.mean_aud, exact) < 0.01, "m0={m0}: {} vs {exact}", r.mean_aud);
        assert!(r.mean_aud < prev);
        prev = r.mean_aud;
    }
    let c = config(&format!("det:period={period}"), mu, "sync:m0=50");
    let r = run_replications(&c, 1_000_000, 5, 99).unwrap();
    assert!(rel(r.mean_aud, average_aud_dm1m(lambda, mu).unwrap()) < 0.01);
}

#[test]
fn offset_sweep_matches_exact_oracle() {
    for delta in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let c = config("det:period=1", 2.0, &format!("offset:delta={delta}"));
        let r = run_replications(&c, 1_000_000, 5, 50).unwrap();
        let exact = exact_offset_aud(1.0, 2.0, delta);
        assert!(rel(r.mean_aud, exact) < 0.01, "delta={delta}: {} vs {exact}", r.mean_aud);
    }
}

#[test]
fn analytic_and_simulated_aud_agree_for_light_tails() {
    for a in ["uniform:beta=2", "fnorm:alpha=1,sigma=0.3", "det:period=1"] {
        let c = config(a, 2.0, "poisson:rate=1");
        let exact = analyze(&c).unwrap().mean_aud;
        let r = run_replications(&c, 1_000_000, 5, 60).unwrap();
        assert!(rel(r.mean_aud, exact) < 0.01, "{a}: {} vs {exact}", r.mean_aud);
    }
}

#[test]
fn replication_failures_carry_the_seed() {
    let c = config("exp:rate=1", 2.0, "poisson:rate=0.001");
    match run_replications(&c, 20, 2, 77) {
        Err(AudError::Replication { seed, stream, .. }) => {
            assert_eq!(seed, 77);
            assert_eq!(stream % 2, 0);
        }
        other => panic!("{other:?}"),
    }
    assert!(run_replications(&c, 1_000, 1, 0).is_err());
}

#[test]
fn dump_round_trips_through_csv() {
    let c = config("exp:rate=1", 2.0, "poisson:rate=1");
    let t = run_trajectory(&c, 500, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.csv");
    assert!(!write_trajectory_csv(&path, &t, DUMP_GZIP_THRESHOLD).unwrap());
    let mut reader = csv::Reader::from_path(&path).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), t.records.len() + t.decisions.len());
    let first = &rows[0];
    assert_eq!(&first[0], "update");
    assert_eq!(first[7].parse::<f64>().unwrap(), t.records[0].departure);
    let d = &rows[t.records.len()];
    assert_eq!(&d[0], "decision");
    assert_eq!(d[12].parse::<f64>().unwrap(), t.decisions[0].aud);
}
