//! Inter-arrival distribution families and the exponential service model.
//!
//! Every family is a scale family with closed-form first and second moments.
//! The Laplace-weighted integrals `E[e^{-sX}]` and `E[X e^{-sX}]` drive the
//! embedded-chain fixed point and the inter-departure moments; they are
//! closed form for all families except Lomax, which falls back on adaptive
//! quadrature over the survival probability.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{AudError, Result};
use crate::quad;
use crate::special::{erfcx, norm_cdf, norm_sf, FRAC_1_SQRT_2PI};

/// Accepted distribution spec strings.
pub const ARRIVAL_GRAMMAR: &str = "exp:rate=<r> | uniform:beta=<b> | lomax:alpha=<a>,beta=<b> | fnorm:alpha=<a>,sigma=<s> | det:period=<p>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Exponential,
    Uniform,
    Lomax,
    FoldedNormal,
    Deterministic,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Exponential,
        Family::Uniform,
        Family::Lomax,
        Family::FoldedNormal,
        Family::Deterministic,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Family::Exponential => "exp",
            Family::Uniform => "uniform",
            Family::Lomax => "lomax",
            Family::FoldedNormal => "fnorm",
            Family::Deterministic => "det",
        }
    }

    /// Names of the free parameters, in parameter-vector order.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Family::Exponential => &["rate"],
            Family::Uniform => &["beta"],
            Family::Lomax => &["alpha", "beta"],
            Family::FoldedNormal => &["alpha", "sigma"],
            Family::Deterministic => &["period"],
        }
    }

    pub fn arity(self) -> usize {
        self.param_names().len()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Family {
    type Err = AudError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|fam| fam.tag() == s.trim())
            .ok_or_else(|| AudError::Parse {
                input: s.to_string(),
                expected: "one of exp, uniform, lomax, fnorm, det".to_string(),
            })
    }
}

/// Inter-arrival time distribution.
///
/// Construct through the checked constructors or [`ArrivalModel::from_params`];
/// the variants are public for matching only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArrivalModel {
    Exponential { rate: f64 },
    /// Uniform on `(0, width)`.
    Uniform { width: f64 },
    /// Lomax (Pareto II) with `shape > 2` so that the second moment exists.
    Lomax { shape: f64, scale: f64 },
    /// `|N(location, scale^2)|`; `scale == 0` is a point mass at `location`.
    FoldedNormal { location: f64, scale: f64 },
    Deterministic { period: f64 },
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(AudError::InvalidParameter(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(AudError::InvalidParameter(format!(
            "{name} must be non-negative and finite, got {v}"
        )))
    }
}

impl ArrivalModel {
    pub fn exponential(rate: f64) -> Result<Self> {
        Ok(Self::Exponential {
            rate: positive("rate", rate)?,
        })
    }

    pub fn uniform(width: f64) -> Result<Self> {
        Ok(Self::Uniform {
            width: positive("beta", width)?,
        })
    }

    pub fn lomax(shape: f64, scale: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 2.0) {
            return Err(AudError::InvalidParameter(format!(
                "lomax alpha must exceed 2 for a finite second moment, got {shape}"
            )));
        }
        Ok(Self::Lomax {
            shape,
            scale: positive("beta", scale)?,
        })
    }

    pub fn folded_normal(location: f64, scale: f64) -> Result<Self> {
        let location = nonnegative("alpha", location)?;
        let scale = nonnegative("sigma", scale)?;
        if location == 0.0 && scale == 0.0 {
            return Err(AudError::InvalidParameter(
                "fnorm with alpha = sigma = 0 has zero mean".to_string(),
            ));
        }
        Ok(Self::FoldedNormal { location, scale })
    }

    pub fn deterministic(period: f64) -> Result<Self> {
        Ok(Self::Deterministic {
            period: positive("period", period)?,
        })
    }

    pub fn from_params(family: Family, params: &[f64]) -> Result<Self> {
        if params.len() != family.arity() {
            return Err(AudError::InvalidParameter(format!(
                "{family} takes {} parameter(s), got {}",
                family.arity(),
                params.len()
            )));
        }
        match family {
            Family::Exponential => Self::exponential(params[0]),
            Family::Uniform => Self::uniform(params[0]),
            Family::Lomax => Self::lomax(params[0], params[1]),
            Family::FoldedNormal => Self::folded_normal(params[0], params[1]),
            Family::Deterministic => Self::deterministic(params[0]),
        }
    }

    /// Re-checks the construction invariants (useful after pattern-built values).
    pub fn validate(&self) -> Result<()> {
        Self::from_params(self.family(), &self.params()).map(|_| ())
    }

    pub fn family(&self) -> Family {
        match self {
            Self::Exponential { .. } => Family::Exponential,
            Self::Uniform { .. } => Family::Uniform,
            Self::Lomax { .. } => Family::Lomax,
            Self::FoldedNormal { .. } => Family::FoldedNormal,
            Self::Deterministic { .. } => Family::Deterministic,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            Self::Exponential { rate } => vec![rate],
            Self::Uniform { width } => vec![width],
            Self::Lomax { shape, scale } => vec![shape, scale],
            Self::FoldedNormal { location, scale } => vec![location, scale],
            Self::Deterministic { period } => vec![period],
        }
    }

    /// True when the distribution is a single atom (deterministic arrivals).
    pub fn is_point_mass(&self) -> bool {
        matches!(
            self,
            Self::Deterministic { .. } | Self::FoldedNormal { scale: 0.0, .. }
        )
    }

    /// Density `f_X(x)`; point masses have none.
    pub fn pdf(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(AudError::Domain(format!("pdf needs x >= 0, got {x}")));
        }
        match *self {
            Self::Exponential { rate } => Ok(rate * (-rate * x).exp()),
            Self::Uniform { width } => Ok(if x < width { 1.0 / width } else { 0.0 }),
            Self::Lomax { shape, scale } => {
                Ok(shape / scale * (1.0 + x / scale).powf(-(shape + 1.0)))
            }
            Self::FoldedNormal { scale: 0.0, .. } => Err(AudError::NoDensity("fnorm with sigma=0")),
            Self::FoldedNormal { location, scale } => {
                let a = (x - location) / scale;
                let b = (x + location) / scale;
                Ok(FRAC_1_SQRT_2PI / scale * ((-0.5 * a * a).exp() + (-0.5 * b * b).exp()))
            }
            Self::Deterministic { .. } => Err(AudError::NoDensity("deterministic arrivals")),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Self::Exponential { rate } => 1.0 / rate,
            Self::Uniform { width } => width / 2.0,
            Self::Lomax { shape, scale } => scale / (shape - 1.0),
            Self::FoldedNormal { location, scale } => {
                if scale == 0.0 {
                    location
                } else {
                    let r = location / scale;
                    2.0 * scale * FRAC_1_SQRT_2PI * (-0.5 * r * r).exp()
                        + location * (1.0 - 2.0 * norm_cdf(-r))
                }
            }
            Self::Deterministic { period } => period,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            Self::Exponential { rate } => 2.0 / (rate * rate),
            Self::Uniform { width } => width * width / 3.0,
            Self::Lomax { shape, scale } => {
                2.0 * scale * scale / ((shape - 1.0) * (shape - 2.0))
            }
            Self::FoldedNormal { location, scale } => location * location + scale * scale,
            Self::Deterministic { period } => period * period,
        }
    }

    /// Arrival rate `1 / E[X]`.
    pub fn rate(&self) -> f64 {
        1.0 / self.mean()
    }

    /// The same family rescaled so that its arrival rate becomes `rate`.
    pub fn with_rate(&self, rate: f64) -> Result<Self> {
        positive("arrival rate", rate)?;
        let c = 1.0 / (rate * self.mean());
        match *self {
            Self::Exponential { .. } => Self::exponential(rate),
            Self::Uniform { width } => Self::uniform(width * c),
            Self::Lomax { shape, scale } => Self::lomax(shape, scale * c),
            Self::FoldedNormal { location, scale } => Self::folded_normal(location * c, scale * c),
            Self::Deterministic { .. } => Self::deterministic(1.0 / rate),
        }
    }

    /// `E[e^{-sX}]`, the Laplace transform of the density.
    pub fn laplace(&self, s: f64) -> Result<f64> {
        check_s(s)?;
        if s == 0.0 {
            return Ok(1.0);
        }
        match *self {
            Self::Exponential { rate } => Ok(rate / (rate + s)),
            Self::Uniform { width } => {
                let x = s * width;
                Ok(-(-x).exp_m1() / x)
            }
            Self::Lomax { shape, scale } => lomax_expectation(shape, scale, |x| (-s * x).exp()),
            Self::FoldedNormal { location, scale } => {
                if scale == 0.0 {
                    Ok((-s * location).exp())
                } else {
                    Ok(fnorm_mgf_terms(location, scale, s).value())
                }
            }
            Self::Deterministic { period } => Ok((-s * period).exp()),
        }
    }

    /// `E[X e^{-sX}]`.
    pub fn weighted_first_moment(&self, s: f64) -> Result<f64> {
        check_s(s)?;
        if s == 0.0 {
            return Ok(self.mean());
        }
        match *self {
            Self::Exponential { rate } => Ok(rate / ((rate + s) * (rate + s))),
            Self::Uniform { width } => Ok(uniform_weighted_moment(width, s)),
            Self::Lomax { shape, scale } => lomax_expectation(shape, scale, |x| x * (-s * x).exp()),
            Self::FoldedNormal { location, scale } => {
                if scale == 0.0 {
                    Ok(location * (-s * location).exp())
                } else {
                    Ok(fnorm_mgf_terms(location, scale, s).derivative())
                }
            }
            Self::Deterministic { period } => Ok(period * (-s * period).exp()),
        }
    }

    /// One inter-arrival draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Exponential { rate } => {
                let u: f64 = rng.random();
                -(-u).ln_1p() / rate
            }
            Self::Uniform { width } => width * rng.random::<f64>(),
            Self::Lomax { shape, scale } => {
                let u: f64 = rng.random();
                scale * ((1.0 - u).powf(-1.0 / shape) - 1.0)
            }
            Self::FoldedNormal { location, scale } => {
                let z: f64 = rng.sample(StandardNormal);
                (location + scale * z).abs()
            }
            Self::Deterministic { period } => period,
        }
    }
}

/// `E[g(X)]` for a Lomax law, integrated over the survival probability
/// `v = (1 + x/scale)^{-shape}` so that the integrand stays spread over
/// `(0, 1]` for any shape, including the near-exponential regime.
fn lomax_expectation<G: Fn(f64) -> f64>(shape: f64, scale: f64, g: G) -> Result<f64> {
    let r = quad::integrate(
        |v: f64| {
            if v <= 0.0 {
                return 0.0;
            }
            let x = scale * (-v.ln() / shape).exp_m1();
            let y = g(x);
            if y.is_finite() {
                y
            } else {
                0.0
            }
        },
        0.0,
        1.0,
        quad::DEFAULT_ABS_TOL,
        quad::DEFAULT_REL_TOL,
    )?;
    Ok(r.value)
}

fn check_s(s: f64) -> Result<()> {
    if s >= 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(AudError::Domain(format!(
            "transform argument must be finite and >= 0, got {s}"
        )))
    }
}

/// `(1/b) * int_0^b x e^{-sx} dx`.
fn uniform_weighted_moment(width: f64, s: f64) -> f64 {
    let x = s * width;
    if x < 0.5 {
        // width * sum_n (-x)^n / (n! (n + 2))
        let mut term = 1.0;
        let mut sum = 0.5;
        for n in 1..40 {
            term *= -x / n as f64;
            let add = term / (n as f64 + 2.0);
            sum += add;
            if add.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        width * sum
    } else {
        // width / x^2 * (1 - e^{-x}(1 + x))
        let e = (-x).exp();
        width / (x * x) * (-(-x).exp_m1() - x * e)
    }
}

/// The two halves of the folded-normal MGF evaluated at `t = -s`.
///
/// `upper = e^{s^2 sig^2/2 - a s} (1 - Phi(-a/sig + sig s))`,
/// `lower = e^{s^2 sig^2/2 + a s} (1 - Phi(a/sig + sig s))`; whenever the
/// normal tail argument is positive the product is rewritten through the
/// scaled complementary error function, which collapses the exponent to
/// `-a^2 / (2 sig^2)` and avoids `0 * inf`.
struct FnormMgf {
    location: f64,
    scale: f64,
    s: f64,
    upper: f64,
    lower: f64,
    kernel: f64,
}

fn fnorm_mgf_terms(location: f64, scale: f64, s: f64) -> FnormMgf {
    let r = location / scale;
    let kernel = (-0.5 * r * r).exp();
    let z_upper = -r + scale * s;
    let upper = if z_upper > 0.0 {
        0.5 * erfcx(z_upper / SQRT_2) * kernel
    } else {
        (0.5 * scale * scale * s * s - location * s).exp() * norm_sf(z_upper)
    };
    let z_lower = r + scale * s;
    let lower = 0.5 * erfcx(z_lower / SQRT_2) * kernel;
    FnormMgf {
        location,
        scale,
        s,
        upper,
        lower,
        kernel,
    }
}

impl FnormMgf {
    fn value(&self) -> f64 {
        self.upper + self.lower
    }

    /// `G'(t)` at `t = -s`.
    fn derivative(&self) -> f64 {
        let v = self.scale * self.scale * self.s;
        (self.location - v) * self.upper - (self.location + v) * self.lower
            + 2.0 * self.scale * FRAC_1_SQRT_2PI * self.kernel
    }
}

impl fmt::Display for ArrivalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Exponential { rate } => write!(f, "exp:rate={rate}"),
            Self::Uniform { width } => write!(f, "uniform:beta={width}"),
            Self::Lomax { shape, scale } => write!(f, "lomax:alpha={shape},beta={scale}"),
            Self::FoldedNormal { location, scale } => {
                write!(f, "fnorm:alpha={location},sigma={scale}")
            }
            Self::Deterministic { period } => write!(f, "det:period={period}"),
        }
    }
}

/// Splits `tag:key=value,key=value` into the tag and looks up the keys in order.
pub(crate) fn parse_keyed(
    input: &str,
    grammar: &str,
) -> Result<(String, Vec<(String, f64)>)> {
    let err = || AudError::Parse {
        input: input.to_string(),
        expected: grammar.to_string(),
    };
    let (tag, rest) = input.trim().split_once(':').ok_or_else(err)?;
    let mut pairs = Vec::new();
    for item in rest.split(',') {
        let (k, v) = item.split_once('=').ok_or_else(err)?;
        let v: f64 = v.trim().parse().map_err(|_| err())?;
        pairs.push((k.trim().to_string(), v));
    }
    Ok((tag.trim().to_string(), pairs))
}

pub(crate) fn take_keys(
    input: &str,
    grammar: &str,
    pairs: &[(String, f64)],
    keys: &[&str],
) -> Result<Vec<f64>> {
    let err = || AudError::Parse {
        input: input.to_string(),
        expected: grammar.to_string(),
    };
    if pairs.len() != keys.len() {
        return Err(err());
    }
    keys.iter()
        .map(|k| {
            pairs
                .iter()
                .find(|(name, _)| name == k)
                .map(|(_, v)| *v)
                .ok_or_else(err)
        })
        .collect()
}

impl FromStr for ArrivalModel {
    type Err = AudError;

    fn from_str(s: &str) -> Result<Self> {
        let (tag, pairs) = parse_keyed(s, ARRIVAL_GRAMMAR)?;
        let family: Family = tag.parse().map_err(|_| AudError::Parse {
            input: s.to_string(),
            expected: ARRIVAL_GRAMMAR.to_string(),
        })?;
        let values = take_keys(s, ARRIVAL_GRAMMAR, &pairs, family.param_names())?;
        Self::from_params(family, &values)
    }
}

impl Serialize for ArrivalModel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ArrivalModel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Exponential service with rate `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceModel {
    rate: f64,
}

impl ServiceModel {
    pub fn new(rate: f64) -> Result<Self> {
        Ok(Self {
            rate: positive("mu", rate)?,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        -(-u).ln_1p() / self.rate
    }
}
