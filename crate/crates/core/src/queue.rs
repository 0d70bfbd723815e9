//! Closed-form analysis of G/M/1 update-and-decide systems.
//!
//! The embedded Markov chain at arrival epochs has a geometric stationary
//! law with parameter `rho1`, the root in `(0, 1)` of
//! `rho1 = E[exp(-mu (1 - rho1) X)]`. Everything else (system time,
//! inter-departure moments, mean AuD under each decision discipline and the
//! missing probability) follows from `rho1` and a handful of transforms of
//! the inter-arrival law.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dist::{parse_keyed, take_keys, ArrivalModel, ServiceModel};
use crate::error::{AudError, Result};

pub const RHO1_START: f64 = 0.999;
pub const RHO1_TOL: f64 = 1e-12;
pub const RHO1_MAX_ITER: usize = 100_000;

/// Accepted decision spec strings.
pub const DECISION_GRAMMAR: &str = "poisson:rate=<v> | sync:m0=<m> | offset:delta=<d>";

/// How decision epochs are generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecisionProcess {
    /// Poisson decisions at rate `nu`.
    Poisson { rate: f64 },
    /// Periodic decisions at rate `m0 * lambda`, one of them at every arrival epoch.
    PeriodicSync { m0: u32 },
    /// One decision `delta` after every arrival epoch.
    PeriodicOffset { delta: f64 },
}

impl fmt::Display for DecisionProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Poisson { rate } => write!(f, "poisson:rate={rate}"),
            Self::PeriodicSync { m0 } => write!(f, "sync:m0={m0}"),
            Self::PeriodicOffset { delta } => write!(f, "offset:delta={delta}"),
        }
    }
}

impl FromStr for DecisionProcess {
    type Err = AudError;

    fn from_str(s: &str) -> Result<Self> {
        let err = || AudError::Parse {
            input: s.to_string(),
            expected: DECISION_GRAMMAR.to_string(),
        };
        let (tag, pairs) = parse_keyed(s, DECISION_GRAMMAR)?;
        match tag.as_str() {
            "poisson" => {
                let v = take_keys(s, DECISION_GRAMMAR, &pairs, &["rate"])?[0];
                if !(v.is_finite() && v > 0.0) {
                    return Err(AudError::InvalidParameter(format!(
                        "decision rate must be positive, got {v}"
                    )));
                }
                Ok(Self::Poisson { rate: v })
            }
            "sync" => {
                let m = take_keys(s, DECISION_GRAMMAR, &pairs, &["m0"])?[0];
                if !(m >= 1.0 && m.fract() == 0.0 && m <= u32::MAX as f64) {
                    return Err(AudError::InvalidParameter(format!(
                        "m0 must be a positive integer, got {m}"
                    )));
                }
                Ok(Self::PeriodicSync { m0: m as u32 })
            }
            "offset" => {
                let d = take_keys(s, DECISION_GRAMMAR, &pairs, &["delta"])?[0];
                Ok(Self::PeriodicOffset { delta: d })
            }
            _ => Err(err()),
        }
    }
}

impl Serialize for DecisionProcess {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DecisionProcess {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One update-and-decide system: arrival law, exponential service, decision discipline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SystemConfig {
    arrival: ArrivalModel,
    service: ServiceModel,
    decision: DecisionProcess,
}

impl SystemConfig {
    pub fn new(arrival: ArrivalModel, service: ServiceModel, decision: DecisionProcess) -> Result<Self> {
        arrival.validate()?;
        let lambda = arrival.rate();
        let rho = lambda / service.rate();
        if !(rho < 1.0) {
            return Err(AudError::Unstable { rho });
        }
        match decision {
            DecisionProcess::Poisson { rate } => {
                if !(rate.is_finite() && rate > 0.0) {
                    return Err(AudError::InvalidParameter(format!(
                        "decision rate must be positive, got {rate}"
                    )));
                }
            }
            DecisionProcess::PeriodicSync { m0 } => {
                if m0 == 0 {
                    return Err(AudError::InvalidParameter("m0 must be at least 1".to_string()));
                }
                require_point_mass(&arrival, "synchronous periodic decisions")?;
            }
            DecisionProcess::PeriodicOffset { delta } => {
                require_point_mass(&arrival, "offset periodic decisions")?;
                let period = 1.0 / lambda;
                if !(delta > 0.0 && delta < period) {
                    return Err(AudError::Domain(format!(
                        "offset must lie in (0, {period}), got {delta}"
                    )));
                }
            }
        }
        Ok(Self {
            arrival,
            service,
            decision,
        })
    }

    /// Convenience constructor from the CLI spec strings.
    pub fn parse(arrival: &str, mu: f64, decision: &str) -> Result<Self> {
        Self::new(arrival.parse()?, ServiceModel::new(mu)?, decision.parse()?)
    }

    pub fn arrival(&self) -> &ArrivalModel {
        &self.arrival
    }

    pub fn service(&self) -> &ServiceModel {
        &self.service
    }

    pub fn decision(&self) -> &DecisionProcess {
        &self.decision
    }

    pub fn lambda(&self) -> f64 {
        self.arrival.rate()
    }

    pub fn mu(&self) -> f64 {
        self.service.rate()
    }

    pub fn rho(&self) -> f64 {
        self.lambda() / self.mu()
    }

    /// Long-run decision rate `nu`.
    pub fn decision_rate(&self) -> f64 {
        match self.decision {
            DecisionProcess::Poisson { rate } => rate,
            DecisionProcess::PeriodicSync { m0 } => m0 as f64 * self.lambda(),
            DecisionProcess::PeriodicOffset { .. } => self.lambda(),
        }
    }
}

fn require_point_mass(arrival: &ArrivalModel, what: &str) -> Result<()> {
    if arrival.is_point_mass() {
        Ok(())
    } else {
        Err(AudError::InvalidParameter(format!(
            "{what} require deterministic arrivals, got {arrival}"
        )))
    }
}

/// Output of the fixed-point iteration for `rho1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rho1Solution {
    pub rho1: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Every iterate, starting with the initial value.
    pub trace: Vec<f64>,
}

/// Solves `rho1 = laplace(arrival, mu (1 - rho1))` by successive substitution
/// from `RHO1_START`, stopping once the residual is at most `tol`.
pub fn solve_rho1(arrival: &ArrivalModel, mu: f64, tol: f64, max_iter: usize) -> Result<Rho1Solution> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(AudError::InvalidParameter(format!("mu must be positive, got {mu}")));
    }
    if !(tol > 0.0) {
        return Err(AudError::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let rho = arrival.rate() / mu;
    if !(rho < 1.0) {
        return Err(AudError::Unstable { rho });
    }
    let mut r = RHO1_START;
    let mut trace = vec![r];
    let mut residual = f64::INFINITY;
    for it in 0..max_iter {
        let next = arrival.laplace(mu * (1.0 - r))?;
        residual = (next - r).abs();
        if residual <= tol {
            return Ok(Rho1Solution {
                rho1: r,
                residual,
                iterations: it,
                trace,
            });
        }
        r = next;
        trace.push(r);
    }
    Err(AudError::NotConverged {
        what: "rho1 fixed point",
        iterations: max_iter,
        last: r,
        residual,
    })
}

/// `solve_rho1` with the default tolerance and iteration cap.
pub fn rho1(arrival: &ArrivalModel, mu: f64) -> Result<f64> {
    if arrival.is_point_mass() {
        let rho = arrival.rate() / mu;
        if !(rho < 1.0) {
            return Err(AudError::Unstable { rho });
        }
        return rho1_deterministic(rho);
    }
    solve_rho1(arrival, mu, RHO1_TOL, RHO1_MAX_ITER).map(|s| s.rho1)
}

/// Principal branch of the Lambert W function, by Halley iteration.
pub fn lambert_w0(x: f64) -> Result<f64> {
    const BRANCH: f64 = -1.0 / std::f64::consts::E;
    if x.is_nan() || x < BRANCH {
        return Err(AudError::Domain(format!("lambert_w0 needs x >= -1/e, got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let mut w = if x < -0.25 {
        // series around the branch point in p = sqrt(2 (e x + 1))
        let p = (2.0 * (std::f64::consts::E * x + 1.0)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else if x < 3.0 {
        x.ln_1p() * (1.0 - 0.2 * x.ln_1p() / (1.0 + x.ln_1p()).max(0.5))
    } else {
        let l = x.ln();
        l - l.ln()
    };
    if w <= -1.0 {
        return Ok(-1.0);
    }
    let tol = 1e-13 * x.abs().max(1.0);
    for _ in 0..100 {
        let ew = w.exp();
        let f = w * ew - x;
        if f.abs() <= tol {
            return Ok(w);
        }
        let wp1 = w + 1.0;
        let step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        let next = w - step;
        if !next.is_finite() {
            break;
        }
        if next == w {
            // converged to machine precision without meeting `tol`
            return Ok(w);
        }
        w = next.max(-1.0);
    }
    let residual = w * w.exp() - x;
    if residual.abs() <= 4.0 * tol {
        Ok(w)
    } else {
        Err(AudError::NotConverged {
            what: "lambert_w0",
            iterations: 100,
            last: w,
            residual,
        })
    }
}

/// `rho1` for periodic arrivals: `-rho W0(-(1/rho) e^{-1/rho})`.
pub fn rho1_deterministic(rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(if rho >= 1.0 {
            AudError::Unstable { rho }
        } else {
            AudError::InvalidParameter(format!("load must be in (0, 1), got {rho}"))
        });
    }
    let x = -(1.0 / rho) * (-1.0 / rho).exp();
    Ok(-rho * lambert_w0(x)?)
}

/// Stationary probability that an arrival finds `j` updates ahead of it.
pub fn stationary_queue_pmf(rho1: f64, j: u64) -> f64 {
    (1.0 - rho1) * rho1.powf(j as f64)
}

/// Rate of the exponential system time.
pub fn system_time_rate(mu: f64, rho1: f64) -> f64 {
    mu * (1.0 - rho1)
}

/// First two moments of the inter-departure time and the cross moment
/// `E[T_{k-1} Y_k]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepartureMoments {
    pub mean: f64,
    pub second: f64,
    pub cross: f64,
}

pub fn departure_moments(arrival: &ArrivalModel, mu: f64, rho1: f64) -> Result<DepartureMoments> {
    let r = system_time_rate(mu, rho1);
    let ex = arrival.mean();
    let q1 = arrival.weighted_first_moment(r)?;
    Ok(moments_from(ex, arrival.second_moment(), mu, rho1, q1))
}

fn moments_from(ex: f64, ex2: f64, mu: f64, rho1: f64, q1: f64) -> DepartureMoments {
    let r = system_time_rate(mu, rho1);
    DepartureMoments {
        mean: ex,
        second: ex2 - 2.0 * rho1 * ex / r + 2.0 / (mu * r),
        cross: ex / r - 1.0 / (mu * r) + q1 / r,
    }
}

/// Mean AuD of any G/G/1 system under Poisson decisions, from departure moments.
pub fn average_aud_from_moments(mean: f64, second: f64, cross: f64) -> f64 {
    debug_assert!(mean > 0.0);
    (second + 2.0 * cross) / (2.0 * mean)
}

fn check_rates(lambda: f64, mu: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda > 0.0 && mu.is_finite() && mu > 0.0) {
        return Err(AudError::InvalidParameter(format!(
            "rates must be positive, got lambda={lambda}, mu={mu}"
        )));
    }
    let rho = lambda / mu;
    if rho >= 1.0 {
        return Err(AudError::Unstable { rho });
    }
    Ok(rho)
}

/// Mean AuD of the M/M/1/M system.
pub fn average_aud_mm1m(lambda: f64, mu: f64) -> Result<f64> {
    let rho = check_rates(lambda, mu)?;
    Ok((1.0 + 1.0 / rho + rho * rho / (1.0 - rho)) / mu)
}

/// Mean AuD of the D/M/1/M system.
pub fn average_aud_dm1m(lambda: f64, mu: f64) -> Result<f64> {
    let rho = check_rates(lambda, mu)?;
    let rho1 = rho1_deterministic(rho)?;
    Ok(0.5 / lambda + 1.0 / (mu * (1.0 - rho1)))
}

/// Mean AuD of the D/M/1/D system with decisions synchronized to arrivals.
pub fn average_aud_dm1d_sync(lambda: f64, mu: f64, m0: u32) -> Result<f64> {
    let rho = check_rates(lambda, mu)?;
    if m0 == 0 {
        return Err(AudError::InvalidParameter("m0 must be at least 1".to_string()));
    }
    let rho1 = rho1_deterministic(rho)?;
    let nu = m0 as f64 * lambda;
    let w1 = (-mu * (1.0 - rho1) / nu).exp();
    Ok((1.0 + m0 as f64) / (2.0 * nu) + w1 / (nu * (1.0 - w1)))
}

/// Mean AuD of the D/M/1/D system with decisions `delta` after each arrival.
pub fn average_aud_dm1d_offset(lambda: f64, mu: f64, delta: f64) -> Result<f64> {
    let rho = check_rates(lambda, mu)?;
    if !(delta > 0.0 && delta < 1.0 / lambda) {
        return Err(AudError::Domain(format!(
            "offset must lie in (0, {}), got {delta}",
            1.0 / lambda
        )));
    }
    let rho1 = rho1_deterministic(rho)?;
    Ok(offset_aud(lambda, mu, rho1, delta))
}

fn offset_aud(lambda: f64, mu: f64, rho1: f64, delta: f64) -> f64 {
    let rho0 = (-mu / lambda).exp();
    let u0 = (-mu * delta).exp();
    let u1 = (-mu * (1.0 - rho1) * delta).exp();
    delta
        + ((1.0 - rho0) * u1 * u1 + (1.0 - rho1) * (1.0 - u0) * u1)
            / (lambda * (1.0 - rho1) * (1.0 - rho0))
}

/// Derivative of the offset AuD with respect to `delta`, written in
/// `u1 = exp(-mu (1 - rho1) delta)`. Positive means a larger offset costs more.
pub fn offset_derivative_phi(rho: f64, rho0: f64, rho1: f64, u1: f64) -> f64 {
    let c = rho * (1.0 - rho0);
    1.0 - 2.0 * u1 * u1 / rho - (1.0 - rho1) * u1 / c
        + (2.0 - rho1) / c * u1.powf((2.0 - rho1) / (1.0 - rho1))
}

/// Missing probability of a G/M/1 system with Poisson decisions at rate `nu`.
pub fn missing_prob_gm1m(arrival: &ArrivalModel, mu: f64, nu: f64) -> Result<f64> {
    if !(nu.is_finite() && nu > 0.0) {
        return Err(AudError::InvalidParameter(format!(
            "decision rate must be positive, got {nu}"
        )));
    }
    let rho1 = rho1(arrival, mu)?;
    missing_prob_with_rho1(arrival, mu, rho1, nu)
}

/// Half-width of the band around `nu = mu (1 - rho1)` where the direct
/// formula is replaced by interpolation, relative to `mu`.
const SINGULAR_BAND: f64 = 1e-3;

fn missing_prob_with_rho1(arrival: &ArrivalModel, mu: f64, rho1: f64, nu: f64) -> Result<f64> {
    let r = system_time_rate(mu, rho1);
    let p = |v: f64| -> Result<f64> {
        let q0 = arrival.laplace(v)?;
        Ok(mu * (r * q0 - v * rho1) / ((mu + v) * (r - v)))
    };
    let value = if (r - nu).abs() < SINGULAR_BAND * mu {
        // Removable singularity. Near it the quotient loses all digits to
        // cancellation, so interpolate from six symmetric nodes around `r`;
        // at `nu == r` this is repeated Richardson extrapolation of the
        // symmetric difference.
        let h = (2.0 * SINGULAR_BAND * mu).min(r / 4.0);
        let nodes: Vec<f64> = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0].iter().map(|k| r + k * h).collect();
        let mut acc = 0.0;
        for (i, &xi) in nodes.iter().enumerate() {
            let weight: f64 = nodes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &xj)| (nu - xj) / (xi - xj))
                .product();
            acc += weight * p(xi)?;
        }
        acc
    } else {
        p(nu)?
    };
    Ok(value.clamp(0.0, 1.0))
}

/// Missing probability of the synchronous D/M/1/D system.
pub fn missing_prob_dm1d_sync(lambda: f64, mu: f64, m0: u32) -> Result<f64> {
    let rho = check_rates(lambda, mu)?;
    if m0 == 0 {
        return Err(AudError::InvalidParameter("m0 must be at least 1".to_string()));
    }
    let rho1 = rho1_deterministic(rho)?;
    let nu = m0 as f64 * lambda;
    let w0 = (-mu / nu).exp();
    let w1 = (-mu * (1.0 - rho1) / nu).exp();
    Ok((rho1 / (2.0 - rho1) * (1.0 / w1 - w0)).clamp(0.0, 1.0))
}

/// All scalar intermediates for one system. Fields that do not apply to the
/// configured decision discipline are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedQuantities {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub rho: f64,
    pub rho1: f64,
    /// `e^{-mu/lambda}`; periodic arrivals only.
    pub rho0: Option<f64>,
    /// `e^{-mu/nu}`; synchronous decisions only.
    pub w0: Option<f64>,
    /// `e^{-mu (1 - rho1)/nu}`; synchronous decisions only.
    pub w1: Option<f64>,
    /// `e^{-mu delta}`; offset decisions only.
    pub u0: Option<f64>,
    /// `e^{-mu (1 - rho1) delta}`; offset decisions only.
    pub u1: Option<f64>,
    /// `E[e^{-nu X}]`; Poisson decisions only.
    pub q0: Option<f64>,
    /// `E[X e^{-mu (1 - rho1) X}]`.
    pub q1: f64,
    pub mean_system_time: f64,
    pub departure: DepartureMoments,
}

impl DerivedQuantities {
    pub fn compute(config: &SystemConfig) -> Result<Self> {
        let arrival = config.arrival();
        let (lambda, mu, nu) = (config.lambda(), config.mu(), config.decision_rate());
        let rho1 = rho1(arrival, mu)?;
        let r = system_time_rate(mu, rho1);
        let q1 = arrival.weighted_first_moment(r)?;
        let departure = moments_from(arrival.mean(), arrival.second_moment(), mu, rho1, q1);
        let rho0 = arrival.is_point_mass().then(|| (-mu / lambda).exp());
        let (mut w0, mut w1, mut u0, mut u1, mut q0) = (None, None, None, None, None);
        match *config.decision() {
            DecisionProcess::Poisson { rate } => q0 = Some(arrival.laplace(rate)?),
            DecisionProcess::PeriodicSync { .. } => {
                w0 = Some((-mu / nu).exp());
                w1 = Some((-r / nu).exp());
            }
            DecisionProcess::PeriodicOffset { delta } => {
                u0 = Some((-mu * delta).exp());
                u1 = Some((-r * delta).exp());
            }
        }
        Ok(Self {
            lambda,
            mu,
            nu,
            rho: config.rho(),
            rho1,
            rho0,
            w0,
            w1,
            u0,
            u1,
            q0,
            q1,
            mean_system_time: 1.0 / r,
            departure,
        })
    }
}

/// Closed-form results for one system under its own decision discipline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Analysis {
    pub derived: DerivedQuantities,
    pub mean_aud: f64,
    /// `None` when no closed form exists for the discipline (offset decisions).
    pub missing_prob: Option<f64>,
}

pub fn analyze(config: &SystemConfig) -> Result<Analysis> {
    let d = DerivedQuantities::compute(config)?;
    let (lambda, mu) = (d.lambda, d.mu);
    let (mean_aud, missing_prob) = match *config.decision() {
        DecisionProcess::Poisson { rate } => {
            let m = d.departure;
            let p = missing_prob_with_rho1(config.arrival(), mu, d.rho1, rate)?;
            (average_aud_from_moments(m.mean, m.second, m.cross), Some(p))
        }
        DecisionProcess::PeriodicSync { m0 } => (
            average_aud_dm1d_sync(lambda, mu, m0)?,
            Some(missing_prob_dm1d_sync(lambda, mu, m0)?),
        ),
        DecisionProcess::PeriodicOffset { delta } => (offset_aud(lambda, mu, d.rho1, delta), None),
    };
    Ok(Analysis {
        derived: d,
        mean_aud,
        missing_prob,
    })
}
