//! Reference computations that share no code with `aud-core`, used as
//! oracles by the acceptance run.

/// Root of `r = exp(-(1 - r) / rho)` in `(0, 1)` by bisection; the stationary
/// probability that a D/M/1 arrival finds the server busy.
pub fn busy_probability_dm1(rho: f64) -> f64 {
    assert!(rho > 0.0 && rho < 1.0, "load must lie in (0, 1)");
    let g = |r: f64| (-(1.0 - r) / rho).exp() - r;
    // g > 0 just above 0 and g < 0 just below 1 when rho < 1
    let (mut lo, mut hi) = (0.0f64, 1.0 - 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact mean AuD of a D/M/1 queue whose decisions fall `delta` after each
/// arrival.
///
/// An arrival finds `L` updates in the system with `P(L = j) = (1 - r) r^j`.
/// By the decision epoch, `P ~ Poisson(mu delta)` service completions could
/// have occurred, so `R = max(L + 1 - P, 0)` of the `L + 1` updates are still
/// present and the freshest departed update arrived `R` periods earlier.
pub fn offset_aud_dm1(lambda: f64, mu: f64, delta: f64) -> f64 {
    let r = busy_probability_dm1(lambda / mu);
    let m = mu * delta;
    let mut pois = vec![(-m).exp()];
    let mut expected_r = 0.0;
    let mut pl = 1.0 - r;
    let mut n = 1usize;
    while pl > 1e-18 {
        while pois.len() < n {
            let p = pois.len();
            pois.push(pois[p - 1] * m / p as f64);
        }
        let remaining: f64 = (0..n).map(|p| (n - p) as f64 * pois[p]).sum();
        expected_r += pl * remaining;
        pl *= r;
        n += 1;
    }
    delta + expected_r / lambda
}
