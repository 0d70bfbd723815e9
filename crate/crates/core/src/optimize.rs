//! Optimal arrival laws and optimal decision offsets.
//!
//! [`bisection_optimal_arrival`] finds the smallest mean AuD reachable within
//! one arrival family by bisecting on a threshold `c0`: the threshold is
//! feasible when `E[Y^2] + 2 E[T Y] - 2 c0 E[Y]` can be pushed below zero,
//! which is decided by an unconstrained Nelder–Mead search with an additive
//! penalty on unstable or invalid parameters. [`optimize_offset`] locates the
//! root of the offset derivative with a sign-driven adaptive step.

use serde::Serialize;

use crate::dist::{ArrivalModel, Family};
use crate::error::{AudError, Result};
use crate::queue::{self, average_aud_from_moments, offset_derivative_phi, rho1_deterministic};

/// Penalty added to the inner objective on unstable or invalid parameters.
pub const DEFAULT_PENALTY: f64 = 1e9;
/// Lomax shapes above this are treated as invalid; the family tends to the
/// exponential law as the shape grows and the inner search would otherwise
/// drift without bound.
pub const LOMAX_SHAPE_CAP: f64 = 1e6;
/// Lower floor on the folded-normal scale when optimized in log space.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    /// Stop when both the simplex diameter and the spread of function values are below this.
    pub tol: f64,
    pub max_evals: usize,
    /// Stop as soon as a value strictly below this is found.
    pub target: Option<f64>,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_evals: 10_000,
            target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
}

/// Nelder–Mead minimization with standard coefficients and one restart from
/// the converged point.
pub fn simplex_minimize<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &SimplexOptions,
) -> Result<SimplexResult> {
    if x0.is_empty() {
        return Err(AudError::InvalidParameter("empty start vector".to_string()));
    }
    let f0 = f(x0);
    if !f0.is_finite() {
        return Err(AudError::Setup(format!(
            "objective is not finite at the start point {x0:?}"
        )));
    }
    let mut evals = 1;
    let mut best = (x0.to_vec(), f0);
    for _ in 0..2 {
        let run = nelder_mead(&mut f, &best.0, best.1, opts, &mut evals)?;
        let improved = run.1 < best.1;
        best = run;
        if !improved || opts.target.is_some_and(|t| best.1 < t) {
            break;
        }
    }
    Ok(SimplexResult {
        x: best.0,
        f: best.1,
        evaluations: evals,
    })
}

fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x0: &[f64],
    f0: f64,
    opts: &SimplexOptions,
    evals: &mut usize,
) -> Result<(Vec<f64>, f64)> {
    let n = x0.len();
    let mut pts: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] = if x[i] != 0.0 { 1.05 * x[i] } else { 2.5e-4 };
        let fx = f(&x);
        *evals += 1;
        pts.push((x, fx));
    }
    let hit = |v: f64| opts.target.is_some_and(|t| v < t);
    loop {
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        if hit(pts[0].1) {
            return Ok(pts.swap_remove(0));
        }
        let spread = (pts[n].1 - pts[0].1).abs();
        let diameter = pts[1..]
            .iter()
            .flat_map(|p| p.0.iter().zip(&pts[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if diameter <= opts.tol && spread <= opts.tol {
            return Ok(pts.swap_remove(0));
        }
        if *evals >= opts.max_evals {
            return Err(AudError::SimplexExhausted {
                evaluations: *evals,
                best_x: pts[0].0.clone(),
                best_f: pts[0].1,
            });
        }
        let mut centroid = vec![0.0; n];
        for p in &pts[..n] {
            for (c, v) in centroid.iter_mut().zip(&p.0) {
                *c += v / n as f64;
            }
        }
        let toward = |t: f64, worst: &[f64]| -> Vec<f64> {
            centroid
                .iter()
                .zip(worst)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let worst = pts[n].0.clone();
        let xr = toward(-1.0, &worst);
        let fr = f(&xr);
        *evals += 1;
        if fr < pts[0].1 {
            let xe = toward(-2.0, &worst);
            let fe = f(&xe);
            *evals += 1;
            pts[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < pts[n - 1].1 {
            pts[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < pts[n].1 {
                let xc = toward(-0.5, &worst);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = toward(0.5, &worst);
                let fc = f(&xc);
                (xc, fc)
            };
            *evals += 1;
            if fc < pts[n].1.min(fr) {
                pts[n] = (xc, fc);
            } else {
                let best = pts[0].0.clone();
                for p in pts.iter_mut().skip(1) {
                    let x: Vec<f64> = best.iter().zip(&p.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
                    let fx = f(&x);
                    *p = (x, fx);
                }
                *evals += n;
            }
        }
    }
}

/// The inner objective for one arrival family at threshold `c0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub family: Family,
    pub mu: f64,
    pub c0: f64,
    pub penalty: f64,
}

impl ObjectiveSpec {
    pub fn new(family: Family, mu: f64, c0: f64) -> Result<Self> {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(AudError::InvalidParameter(format!("mu must be positive, got {mu}")));
        }
        Ok(Self {
            family,
            mu,
            c0,
            penalty: DEFAULT_PENALTY,
        })
    }
}

/// Departure moments of a stable model, or `None` when the parameters are
/// out of range or the queue is unstable.
fn moments_at(family: Family, mu: f64, kappa: &[f64]) -> Option<queue::DepartureMoments> {
    if family == Family::Lomax && kappa.first().is_some_and(|&a| a > LOMAX_SHAPE_CAP) {
        return None;
    }
    let model = ArrivalModel::from_params(family, kappa).ok()?;
    if model.rate() >= mu {
        return None;
    }
    let rho1 = queue::rho1(&model, mu).ok()?;
    queue::departure_moments(&model, mu, rho1).ok()
}

/// `E[Y^2] + 2 E[T Y] - 2 c0 E[Y]`, or the penalty constant when `kappa`
/// is invalid or unstable.
pub fn penalized_objective(spec: &ObjectiveSpec, kappa: &[f64]) -> f64 {
    match moments_at(spec.family, spec.mu, kappa) {
        Some(m) => {
            let v = m.second + 2.0 * m.cross - 2.0 * spec.c0 * m.mean;
            if v.is_finite() {
                v
            } else {
                spec.penalty
            }
        }
        None => spec.penalty,
    }
}

/// Mean AuD under Poisson decisions for one parameter vector.
pub fn family_aud(family: Family, mu: f64, kappa: &[f64]) -> Result<f64> {
    let model = ArrivalModel::from_params(family, kappa)?;
    let rho1 = queue::rho1(&model, mu)?;
    let m = queue::departure_moments(&model, mu, rho1)?;
    Ok(average_aud_from_moments(m.mean, m.second, m.cross))
}

/// Start vector giving load 1/2.
pub fn default_start(family: Family, mu: f64) -> Vec<f64> {
    match family {
        Family::Exponential => vec![mu / 2.0],
        Family::Uniform => vec![4.0 / mu],
        Family::Lomax => vec![3.0, 4.0 / mu],
        Family::FoldedNormal => vec![2.0 / mu, 0.5 / mu],
        Family::Deterministic => vec![2.0 / mu],
    }
}

const JITTER: [f64; 3] = [1.0, 0.8, 1.25];

// Search coordinates: the folded-normal scale lives on a log axis, all else as is.
fn to_search(family: Family, kappa: &[f64]) -> Vec<f64> {
    let mut z = kappa.to_vec();
    if family == Family::FoldedNormal {
        z[1] = z[1].max(SIGMA_FLOOR).ln();
    }
    z
}

fn from_search(family: Family, z: &[f64]) -> Vec<f64> {
    let mut k = z.to_vec();
    if family == Family::FoldedNormal {
        k[1] = z[1].exp().max(SIGMA_FLOOR);
    }
    k
}

#[derive(Debug, Clone, PartialEq)]
struct InnerResult {
    kappa: Vec<f64>,
    value: f64,
    evaluations: usize,
}

/// Multi-start minimization of the penalized objective. With `early_exit`,
/// returns as soon as any negative value is found.
fn inner_minimum(spec: &ObjectiveSpec, start: &[f64], early_exit: bool) -> Result<InnerResult> {
    let opts = SimplexOptions {
        target: early_exit.then_some(0.0),
        ..SimplexOptions::default()
    };
    let mut best: Option<InnerResult> = None;
    let mut evaluations = 0;
    let mut last_err = None;
    for scale in JITTER {
        let kappa0: Vec<f64> = start.iter().map(|v| v * scale).collect();
        let z0 = to_search(spec.family, &kappa0);
        let objective = |z: &[f64]| penalized_objective(spec, &from_search(spec.family, z));
        match simplex_minimize(objective, &z0, &opts) {
            Ok(r) => {
                evaluations += r.evaluations;
                if best.as_ref().is_none_or(|b| r.f < b.value) {
                    best = Some(InnerResult {
                        kappa: from_search(spec.family, &r.x),
                        value: r.f,
                        evaluations: 0,
                    });
                }
                if early_exit && r.f < 0.0 {
                    break;
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some(mut b) => {
            b.evaluations = evaluations;
            Ok(b)
        }
        None => Err(AudError::Inner {
            c0: spec.c0,
            source: Box::new(last_err.expect("at least one start ran")),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationResult {
    pub family: String,
    pub mu: f64,
    /// Optimal parameters in the family's natural order.
    pub kappa: Vec<f64>,
    pub param_names: Vec<String>,
    /// Upper end of the final bracket: the smallest threshold shown feasible.
    pub c0_star: f64,
    /// Mean AuD evaluated at `kappa`.
    pub aud: f64,
    pub lambda_star: f64,
    pub outer_iterations: usize,
    /// Objective evaluations per outer iteration.
    pub inner_evaluations: Vec<usize>,
    pub converged: bool,
    pub lower: f64,
    pub upper: f64,
    pub bracket_width: f64,
    pub tolerance: f64,
}

/// Default bisection tolerance `1e-6 / mu`.
pub fn default_tolerance(mu: f64) -> f64 {
    1e-6 / mu
}

/// Smallest mean AuD reachable within `family` at service rate `mu`.
///
/// `start` overrides the default load-1/2 start vector; `upper` overrides the
/// initial upper bracket (ten times the AuD at the start vector).
pub fn bisection_optimal_arrival(
    family: Family,
    mu: f64,
    tol: f64,
    start: Option<&[f64]>,
    upper: Option<f64>,
    max_outer: usize,
) -> Result<OptimizationResult> {
    if !(tol > 0.0) {
        return Err(AudError::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let start = start.map_or_else(|| default_start(family, mu), <[f64]>::to_vec);
    if start.len() != family.arity() {
        return Err(AudError::InvalidParameter(format!(
            "{family} takes {} parameter(s), got {}",
            family.arity(),
            start.len()
        )));
    }
    let mut u = match upper {
        Some(u) => u,
        None => 10.0 * family_aud(family, mu, &start).map_err(|e| {
            AudError::Setup(format!("start point {start:?} is not usable: {e}"))
        })?,
    };
    let mut l = 0.0;
    let mut spec = ObjectiveSpec::new(family, mu, u)?;
    let init = inner_minimum(&spec, &start, true)?;
    if !(init.value < 0.0) {
        return Err(AudError::Setup(format!(
            "upper bound c0={u} is not feasible (inner minimum {})",
            init.value
        )));
    }
    let mut warm = init.kappa;
    let mut inner_evaluations = vec![init.evaluations];
    let mut outer = 0;
    while u - l > tol && outer < max_outer {
        let c0 = 0.5 * (l + u);
        spec.c0 = c0;
        let r = inner_minimum(&spec, &start, true).map_err(|e| match e {
            AudError::Inner { .. } => e,
            other => AudError::Inner {
                c0,
                source: Box::new(other),
            },
        })?;
        inner_evaluations.push(r.evaluations);
        if r.value < 0.0 {
            u = c0;
            warm = r.kappa;
        } else {
            l = c0;
        }
        outer += 1;
    }
    // polish the witness at the final feasible threshold
    spec.c0 = u;
    let polished = inner_minimum(&spec, &warm, false)?;
    inner_evaluations.push(polished.evaluations);
    let kappa = if polished.value < 0.0 { polished.kappa } else { warm };
    let model = ArrivalModel::from_params(family, &kappa)?;
    Ok(OptimizationResult {
        family: family.tag().to_string(),
        mu,
        aud: family_aud(family, mu, &kappa)?,
        lambda_star: model.rate(),
        param_names: family.param_names().iter().map(|s| s.to_string()).collect(),
        kappa,
        c0_star: u,
        outer_iterations: outer,
        inner_evaluations,
        converged: u - l <= tol,
        lower: l,
        upper: u,
        bracket_width: u - l,
        tolerance: tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffsetResult {
    pub lambda: f64,
    pub mu: f64,
    pub delta: f64,
    pub u1: f64,
    pub phi: f64,
    pub iterations: usize,
    pub rho1: f64,
    pub aud: f64,
    pub tolerance: f64,
    /// `(u1, phi(u1))` at every iterate.
    pub trace: Vec<(f64, f64)>,
}

pub const OFFSET_TOL: f64 = 1e-9;
pub const OFFSET_MAX_ITER: usize = 10_000;

/// Optimal offset between each arrival and the following decision in the
/// periodic D/M/1/D system.
pub fn optimize_offset(lambda: f64, mu: f64, tol: f64, max_iter: usize) -> Result<OffsetResult> {
    if !(lambda.is_finite() && lambda > 0.0 && mu.is_finite() && mu > 0.0) {
        return Err(AudError::InvalidParameter(format!(
            "rates must be positive, got lambda={lambda}, mu={mu}"
        )));
    }
    if !(tol > 0.0) {
        return Err(AudError::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let rho = lambda / mu;
    let rho1 = rho1_deterministic(rho)?;
    let rho0 = (-mu / lambda).exp();
    let phi = |u: f64| offset_derivative_phi(rho, rho0, rho1, u);
    let (lo, hi) = (rho1 + 1e-12, 1.0 - 1e-12);
    let mut u = (-(1.0 - rho1) / (2.0 * rho)).exp().clamp(lo, hi);
    let mut step = u / 4.0;
    let mut p = phi(u);
    let mut trace = vec![(u, p)];
    let mut iterations = 0;
    while p.abs() > tol {
        if iterations >= max_iter {
            return Err(AudError::NotConverged {
                what: "offset search",
                iterations,
                last: u,
                residual: p,
            });
        }
        let s = p.signum();
        let pinned = (s < 0.0 && u == lo) || (s > 0.0 && u == hi);
        if pinned {
            // descent points out of the interval: the minimum is on its edge
            return Err(AudError::NotConverged {
                what: "offset search (no interior minimum)",
                iterations,
                last: u,
                residual: p,
            });
        }
        u = (u + s * step).clamp(lo, hi);
        p = phi(u);
        if s * p > 0.0 {
            step *= 2.0;
        } else {
            step /= 7.0;
        }
        trace.push((u, p));
        iterations += 1;
    }
    let delta = -u.ln() / (mu * (1.0 - rho1));
    Ok(OffsetResult {
        lambda,
        mu,
        delta,
        u1: u,
        phi: p,
        iterations,
        rho1,
        aud: queue::average_aud_dm1d_offset(lambda, mu, delta)?,
        tolerance: tol,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic_bowl() {
        let r = simplex_minimize(|x| (x[0] - 3.0).powi(2), &[0.0], &SimplexOptions::default()).unwrap();
        assert_abs_diff_eq!(r.x[0], 3.0, epsilon = 1e-6);
        assert!(r.f <= 1e-12);
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let r = simplex_minimize(f, &[-1.2, 1.0], &SimplexOptions::default()).unwrap();
        assert!(r.f <= 1e-8, "{r:?}");
    }

    #[test]
    fn exhaustion_reports_best() {
        let opts = SimplexOptions {
            max_evals: 10,
            ..SimplexOptions::default()
        };
        match simplex_minimize(|x| (x[0] - 3.0).powi(2), &[0.0], &opts) {
            Err(AudError::SimplexExhausted { best_f, best_x, .. }) => {
                assert!(best_f < 9.0);
                assert_eq!(best_x.len(), 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn penalized_objective_examples() {
        let spec = ObjectiveSpec::new(Family::Exponential, 2.0, 1.75).unwrap();
        assert_abs_diff_eq!(penalized_objective(&spec, &[1.0]), 0.0, epsilon = 1e-8);
        assert!(penalized_objective(&spec, &[3.0]) >= DEFAULT_PENALTY);
        assert!(penalized_objective(&spec, &[-1.0]) >= DEFAULT_PENALTY);
        let spec = ObjectiveSpec::new(Family::Uniform, 2.0, 10.0).unwrap();
        assert!(penalized_objective(&spec, &[2.0]) < 0.0);
    }

    #[test]
    fn inner_exponential_smoke() {
        let spec = ObjectiveSpec::new(Family::Exponential, 2.0, 2.0).unwrap();
        let r = inner_minimum(&spec, &[1.0], false).unwrap();
        assert!(r.kappa[0] > 0.0 && r.kappa[0] < 2.0);
        assert!(r.value < 0.0);
    }

    #[test]
    fn offset_example() {
        let r = optimize_offset(1.0, 2.0, OFFSET_TOL, OFFSET_MAX_ITER).unwrap();
        assert!(r.phi.abs() <= OFFSET_TOL);
        assert!(r.delta > 0.0 && r.delta < 1.0);
        assert!((r.delta - 0.5).abs() > 1e-6);
        assert!(r.aud <= queue::average_aud_dm1d_offset(1.0, 2.0, 0.5).unwrap());
        assert_abs_diff_eq!(r.delta, -r.u1.ln() / (2.0 * (1.0 - r.rho1)), epsilon = 1e-15);
    }
}
