//! State-dependent observation distributions and their link functions.
//!
//! Every family exposes its parameters in a fixed order, a link per parameter
//! mapping the parameter domain onto the real line, and log-density, CDF and
//! sampling routines. Counts are carried as `f64`.
//!
//! Angles for `vm` and `wrpcauchy` live on (-pi, pi]; the mean parameter uses a
//! logit link rescaled to that interval.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Binomial, Cauchy, Distribution, Exp, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use statrs::function::gamma::{digamma, gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Link functions mapping a parameter domain onto the real line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Link {
    Identity,
    Log,
    Logit,
    /// Logit of `(x - lo) / (hi - lo)`.
    ScaledLogit { lo: f64, hi: f64 },
}

impl Link {
    pub fn apply(self, x: f64) -> Result<f64> {
        let out = match self {
            Link::Identity => x,
            Link::Log => {
                if x <= 0.0 {
                    return Err(Error::Domain(format!("log link needs a positive value, got {x}")));
                }
                x.ln()
            }
            Link::Logit => {
                if x <= 0.0 || x >= 1.0 {
                    return Err(Error::Domain(format!("logit link needs a value in (0, 1), got {x}")));
                }
                (x / (1.0 - x)).ln()
            }
            Link::ScaledLogit { lo, hi } => {
                if x <= lo || x >= hi {
                    return Err(Error::Domain(format!(
                        "scaled logit link needs a value in ({lo}, {hi}), got {x}"
                    )));
                }
                let u = (x - lo) / (hi - lo);
                (u / (1.0 - u)).ln()
            }
        };
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::Domain(format!("link of {x} is not finite")))
        }
    }

    pub fn invert(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            Link::Logit => logistic(eta),
            Link::ScaledLogit { lo, hi } => lo + (hi - lo) * logistic(eta),
        }
    }
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Support of a family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Real,
    Positive,
    NonNegative,
    UnitInterval,
    Circle,
    Counts,
}

/// The implemented observation families, named as in model-spec files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Norm,
    Gamma2,
    Pois,
    Exp,
    Beta,
    Binom,
    Nbinom,
    Vm,
    Wrpcauchy,
    Zipois,
    Zigamma2,
}

/// Largest |eta| accepted for the wrapped Cauchy concentration.
pub const WRPCAUCHY_ETA_CAP: f64 = 15.0;

const CIRCLE: Link = Link::ScaledLogit { lo: -PI, hi: PI };

impl Family {
    pub const ALL: [Family; 11] = [
        Family::Norm,
        Family::Gamma2,
        Family::Pois,
        Family::Exp,
        Family::Beta,
        Family::Binom,
        Family::Nbinom,
        Family::Vm,
        Family::Wrpcauchy,
        Family::Zipois,
        Family::Zigamma2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Norm => "norm",
            Family::Gamma2 => "gamma2",
            Family::Pois => "pois",
            Family::Exp => "exp",
            Family::Beta => "beta",
            Family::Binom => "binom",
            Family::Nbinom => "nbinom",
            Family::Vm => "vm",
            Family::Wrpcauchy => "wrpcauchy",
            Family::Zipois => "zipois",
            Family::Zigamma2 => "zigamma2",
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Family::Norm | Family::Gamma2 => &["mean", "sd"],
            Family::Pois | Family::Exp => &["rate"],
            Family::Beta => &["shape1", "shape2"],
            Family::Binom | Family::Nbinom => &["size", "prob"],
            Family::Vm => &["mu", "kappa"],
            Family::Wrpcauchy => &["mu", "rho"],
            Family::Zipois => &["rate", "z"],
            Family::Zigamma2 => &["mean", "sd", "z"],
        }
    }

    pub fn n_params(self) -> usize {
        self.param_names().len()
    }

    pub fn links(self) -> &'static [Link] {
        match self {
            Family::Norm => &[Link::Identity, Link::Log],
            Family::Gamma2 | Family::Beta => &[Link::Log, Link::Log],
            Family::Pois | Family::Exp => &[Link::Log],
            Family::Binom => &[Link::Identity, Link::Logit],
            Family::Nbinom => &[Link::Log, Link::Logit],
            Family::Vm => &[CIRCLE, Link::Log],
            Family::Wrpcauchy => &[CIRCLE, Link::Logit],
            Family::Zipois => &[Link::Log, Link::Logit],
            Family::Zigamma2 => &[Link::Log, Link::Log, Link::Logit],
        }
    }

    pub fn support(self) -> Support {
        match self {
            Family::Norm => Support::Real,
            Family::Gamma2 | Family::Exp => Support::Positive,
            Family::Zigamma2 => Support::NonNegative,
            Family::Beta => Support::UnitInterval,
            Family::Vm | Family::Wrpcauchy => Support::Circle,
            Family::Pois | Family::Binom | Family::Nbinom | Family::Zipois => Support::Counts,
        }
    }

    pub fn is_discrete(self) -> bool {
        self.support() == Support::Counts
    }

    pub fn is_circular(self) -> bool {
        self.support() == Support::Circle
    }

    /// Whether parameter `k` is estimated. The binomial size is always held fixed.
    pub fn is_estimable(self, k: usize) -> bool {
        !(self == Family::Binom && k == 0)
    }

    /// Check that `omega` lies in the parameter domain.
    pub fn validate(self, omega: &[f64]) -> Result<()> {
        if omega.len() != self.n_params() {
            return Err(Error::Domain(format!(
                "{} takes {} parameters, got {}",
                self.name(),
                self.n_params(),
                omega.len()
            )));
        }
        if omega.iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain(format!("{} parameters must be finite", self.name())));
        }
        let ok = match self {
            Family::Norm => omega[1] > 0.0,
            Family::Gamma2 => omega[0] > 0.0 && omega[1] > 0.0,
            Family::Pois | Family::Exp => omega[0] > 0.0,
            Family::Beta => omega[0] > 0.0 && omega[1] > 0.0,
            Family::Binom => omega[0] >= 0.0 && (0.0..=1.0).contains(&omega[1]),
            Family::Nbinom => omega[0] > 0.0 && omega[1] > 0.0 && omega[1] <= 1.0,
            Family::Vm => omega[1] >= 0.0,
            Family::Wrpcauchy => (0.0..1.0).contains(&omega[1]),
            Family::Zipois => omega[0] > 0.0 && (0.0..=1.0).contains(&omega[1]),
            Family::Zigamma2 => omega[0] > 0.0 && omega[1] > 0.0 && (0.0..=1.0).contains(&omega[2]),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "{} parameters {:?} outside domain ({})",
                self.name(),
                omega,
                self.param_names().join(", ")
            )))
        }
    }

    /// Log-density (or log-mass) of `z`; `-inf` outside the support.
    pub fn log_pdf(self, z: f64, omega: &[f64]) -> Result<f64> {
        self.validate(omega)?;
        Ok(self.log_pdf_unchecked(z, omega))
    }

    /// [`Family::log_pdf`] without the domain check, for inner loops whose
    /// parameters come from inverse links.
    pub fn log_pdf_unchecked(self, z: f64, w: &[f64]) -> f64 {
        match self {
            Family::Norm => {
                let u = (z - w[0]) / w[1];
                -0.5 * LN_2PI - w[1].ln() - 0.5 * u * u
            }
            Family::Gamma2 => gamma2_log_pdf(z, w[0], w[1]),
            Family::Pois => pois_log_pmf(z, w[0]),
            Family::Exp => {
                if z < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    w[0].ln() - w[0] * z
                }
            }
            Family::Beta => beta_log_pdf(z, w[0], w[1]),
            Family::Binom => {
                let (n, p) = (w[0], w[1]);
                if !is_count(z) || z > n {
                    return f64::NEG_INFINITY;
                }
                ln_choose(n, z) + xlogy(z, p) + xlogy(n - z, 1.0 - p)
            }
            Family::Nbinom => {
                let (n, p) = (w[0], w[1]);
                if !is_count(z) {
                    return f64::NEG_INFINITY;
                }
                ln_gamma(z + n) - ln_gamma(n) - ln_gamma(z + 1.0) + n * p.ln() + xlogy(z, 1.0 - p)
            }
            Family::Vm => w[1] * (z - w[0]).cos() - LN_2PI - log_bessel_i0(w[1]),
            Family::Wrpcauchy => {
                let rho = w[1];
                (1.0 - rho * rho).ln() - LN_2PI - (1.0 + rho * rho - 2.0 * rho * (z - w[0]).cos()).ln()
            }
            Family::Zipois => {
                let (lambda, zeta) = (w[0], w[1]);
                if !is_count(z) {
                    f64::NEG_INFINITY
                } else if z == 0.0 {
                    (zeta + (1.0 - zeta) * (-lambda).exp()).ln()
                } else {
                    (1.0 - zeta).ln() + pois_log_pmf(z, lambda)
                }
            }
            Family::Zigamma2 => {
                let zeta = w[2];
                if z < 0.0 {
                    f64::NEG_INFINITY
                } else if z == 0.0 {
                    zeta.ln()
                } else {
                    (1.0 - zeta).ln() + gamma2_log_pdf(z, w[0], w[1])
                }
            }
        }
    }

    /// Derivative of [`Family::log_pdf_unchecked`] with respect to the
    /// link-scale value of parameter `param`, where a closed form is available.
    /// `z` must lie in the support.
    pub fn dlog_pdf_deta(self, param: usize, z: f64, w: &[f64]) -> Option<f64> {
        match (self, param) {
            (Family::Norm, 0) => Some((z - w[0]) / (w[1] * w[1])),
            (Family::Norm, 1) => {
                let u = (z - w[0]) / w[1];
                Some(u * u - 1.0)
            }
            (Family::Pois, 0) => Some(z - w[0]),
            (Family::Exp, 0) => Some(1.0 - w[0] * z),
            (Family::Binom, 1) => Some(z - w[0] * w[1]),
            (Family::Gamma2, _) if z > 0.0 => {
                let a = w[0] * w[0] / (w[1] * w[1]);
                let b = w[0] / (w[1] * w[1]);
                let da = (b * z).ln() - digamma(a);
                Some(if param == 0 { 2.0 * a * da + a - b * z } else { -2.0 * a * da - 2.0 * (a - b * z) })
            }
            _ => None,
        }
    }

    /// `P(Z <= z)`.
    pub fn cdf(self, z: f64, omega: &[f64]) -> Result<f64> {
        self.validate(omega)?;
        Ok(self.cdf_unchecked(z, omega))
    }

    /// `P(Z < z)`, the left limit of the CDF. Differs from [`Family::cdf`] only at atoms.
    pub fn cdf_left(self, z: f64, omega: &[f64]) -> Result<f64> {
        self.validate(omega)?;
        Ok(self.cdf_left_unchecked(z, omega))
    }

    pub fn cdf_left_unchecked(self, z: f64, w: &[f64]) -> f64 {
        match self {
            _ if self.is_discrete() => {
                if is_count(z) {
                    self.cdf_unchecked(z - 1.0, w)
                } else {
                    self.cdf_unchecked(z, w)
                }
            }
            Family::Zigamma2 if z == 0.0 => 0.0,
            _ => self.cdf_unchecked(z, w),
        }
    }

    pub fn cdf_unchecked(self, z: f64, w: &[f64]) -> f64 {
        let out = match self {
            Family::Norm => 0.5 * erfc(-(z - w[0]) / (w[1] * std::f64::consts::SQRT_2)),
            Family::Gamma2 => gamma2_cdf(z, w[0], w[1]),
            Family::Pois => {
                if z < 0.0 {
                    0.0
                } else {
                    gamma_ur(z.floor() + 1.0, w[0])
                }
            }
            Family::Exp => {
                if z <= 0.0 {
                    0.0
                } else {
                    -(-w[0] * z).exp_m1()
                }
            }
            Family::Beta => {
                if z <= 0.0 {
                    0.0
                } else if z >= 1.0 {
                    1.0
                } else {
                    beta_reg(w[0], w[1], z)
                }
            }
            Family::Binom => {
                let (n, p) = (w[0], w[1]);
                if z < 0.0 {
                    0.0
                } else if z.floor() >= n {
                    1.0
                } else if p <= 0.0 {
                    1.0
                } else if p >= 1.0 {
                    0.0
                } else {
                    let m = z.floor();
                    beta_reg(n - m, m + 1.0, 1.0 - p)
                }
            }
            Family::Nbinom => {
                let (n, p) = (w[0], w[1]);
                if z < 0.0 {
                    0.0
                } else if p >= 1.0 {
                    1.0
                } else {
                    beta_reg(n, z.floor() + 1.0, p)
                }
            }
            Family::Vm => circular_cdf(z, w[0], |t| vm_antiderivative(t, w[1])),
            Family::Wrpcauchy => circular_cdf(z, w[0], |t| wrpcauchy_antiderivative(t, w[1])),
            Family::Zipois => {
                if z < 0.0 {
                    0.0
                } else {
                    w[1] + (1.0 - w[1]) * gamma_ur(z.floor() + 1.0, w[0])
                }
            }
            Family::Zigamma2 => {
                if z < 0.0 {
                    0.0
                } else {
                    w[2] + (1.0 - w[2]) * gamma2_cdf(z, w[0], w[1])
                }
            }
        };
        out.clamp(0.0, 1.0)
    }

    /// Draw one observation.
    pub fn sample<R: Rng + ?Sized>(self, omega: &[f64], rng: &mut R) -> Result<f64> {
        self.validate(omega)?;
        let w = omega;
        let bad = |e: &dyn fmt::Display| Error::Domain(format!("{}: {e}", self.name()));
        Ok(match self {
            Family::Norm => Normal::new(w[0], w[1]).map_err(|e| bad(&e))?.sample(rng),
            Family::Gamma2 => {
                let (shape, scale) = gamma2_shape_scale(w[0], w[1]);
                Gamma::new(shape, scale).map_err(|e| bad(&e))?.sample(rng)
            }
            Family::Pois => Poisson::new(w[0]).map_err(|e| bad(&e))?.sample(rng),
            Family::Exp => Exp::new(w[0]).map_err(|e| bad(&e))?.sample(rng),
            Family::Beta => Beta::new(w[0], w[1]).map_err(|e| bad(&e))?.sample(rng),
            Family::Binom => Binomial::new(w[0].round() as u64, w[1]).map_err(|e| bad(&e))?.sample(rng) as f64,
            Family::Nbinom => {
                let (n, p) = (w[0], w[1]);
                if p >= 1.0 {
                    0.0
                } else {
                    let rate = Gamma::new(n, (1.0 - p) / p).map_err(|e| bad(&e))?.sample(rng);
                    if rate <= 0.0 {
                        0.0
                    } else {
                        Poisson::new(rate).map_err(|e| bad(&e))?.sample(rng)
                    }
                }
            }
            Family::Vm => wrap_angle(w[0] + sample_von_mises_centered(w[1], rng)),
            Family::Wrpcauchy => {
                let rho = w[1];
                if rho == 0.0 {
                    rng.random_range(-PI..PI)
                } else {
                    let c = Cauchy::new(w[0], -rho.ln()).map_err(|e| bad(&e))?;
                    wrap_angle(c.sample(rng))
                }
            }
            Family::Zipois => {
                if rng.random::<f64>() < w[1] {
                    0.0
                } else {
                    Poisson::new(w[0]).map_err(|e| bad(&e))?.sample(rng)
                }
            }
            Family::Zigamma2 => {
                if rng.random::<f64>() < w[2] {
                    0.0
                } else {
                    let (shape, scale) = gamma2_shape_scale(w[0], w[1]);
                    Gamma::new(shape, scale).map_err(|e| bad(&e))?.sample(rng)
                }
            }
        })
    }

    /// Map natural-scale parameters to the link scale.
    pub fn link_apply(self, omega: &[f64]) -> Result<Vec<f64>> {
        if omega.len() != self.n_params() {
            return Err(Error::Domain(format!("{} takes {} parameters", self.name(), self.n_params())));
        }
        self.links().iter().zip(omega).map(|(l, &w)| l.apply(w)).collect()
    }

    /// Map link-scale values back to natural parameters.
    pub fn link_invert(self, eta: &[f64]) -> Vec<f64> {
        (0..eta.len()).map(|k| self.invert_one(k, eta[k])).collect()
    }

    /// Inverse link of parameter `k`.
    pub fn invert_one(self, k: usize, eta: f64) -> f64 {
        let eta = if self == Family::Wrpcauchy && k == 1 {
            eta.clamp(-WRPCAUCHY_ETA_CAP, WRPCAUCHY_ETA_CAP)
        } else {
            eta
        };
        self.links()[k].invert(eta)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL.iter().copied().find(|f| f.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Family::ALL.iter().map(|f| f.name()).collect();
            Error::Spec(format!("unknown distribution '{s}'; valid options are: {}", names.join(", ")))
        })
    }
}

fn is_count(z: f64) -> bool {
    z >= 0.0 && z.fract() == 0.0 && z.is_finite()
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

fn ln_choose(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

fn pois_log_pmf(z: f64, lambda: f64) -> f64 {
    if !is_count(z) {
        return f64::NEG_INFINITY;
    }
    xlogy(z, lambda) - lambda - ln_gamma(z + 1.0)
}

/// Shape and scale of the gamma distribution with the given mean and sd.
pub fn gamma2_shape_scale(mean: f64, sd: f64) -> (f64, f64) {
    let shape = mean * mean / (sd * sd);
    let scale = sd * sd / mean;
    (shape, scale)
}

fn gamma2_log_pdf(z: f64, mean: f64, sd: f64) -> f64 {
    let (k, theta) = gamma2_shape_scale(mean, sd);
    if z < 0.0 {
        return f64::NEG_INFINITY;
    }
    if z == 0.0 {
        return match k.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Greater) => f64::NEG_INFINITY,
            Some(std::cmp::Ordering::Equal) => -theta.ln(),
            _ => f64::INFINITY,
        };
    }
    (k - 1.0) * z.ln() - z / theta - ln_gamma(k) - k * theta.ln()
}

fn gamma2_cdf(z: f64, mean: f64, sd: f64) -> f64 {
    if z <= 0.0 {
        return 0.0;
    }
    let (k, theta) = gamma2_shape_scale(mean, sd);
    gamma_lr(k, z / theta)
}

fn beta_log_pdf(z: f64, a: f64, b: f64) -> f64 {
    if !(0.0..=1.0).contains(&z) {
        return f64::NEG_INFINITY;
    }
    let ln_b = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    let left = if z == 0.0 {
        match a.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Greater) => f64::NEG_INFINITY,
            Some(std::cmp::Ordering::Equal) => 0.0,
            _ => f64::INFINITY,
        }
    } else {
        (a - 1.0) * z.ln()
    };
    let right = if z == 1.0 {
        match b.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Greater) => f64::NEG_INFINITY,
            Some(std::cmp::Ordering::Equal) => 0.0,
            _ => f64::INFINITY,
        }
    } else {
        (b - 1.0) * (-z).ln_1p()
    };
    left + right - ln_b
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut y = (x + PI).rem_euclid(two_pi) - PI;
    if y <= -PI {
        y += two_pi;
    }
    y
}

/// CDF over (-pi, pi] from a continuous antiderivative of the centred density.
fn circular_cdf(z: f64, mu: f64, antiderivative: impl Fn(f64) -> f64) -> f64 {
    if z <= -PI {
        return 0.0;
    }
    if z >= PI {
        return 1.0;
    }
    antiderivative(z - mu) - antiderivative(-PI - mu)
}

/// Continuous antiderivative of the wrapped Cauchy density centred at 0.
fn wrpcauchy_antiderivative(t: f64, rho: f64) -> f64 {
    // Reduce to (-pi, pi] and count whole turns, each worth 1.
    let turns = ((t + PI) / (2.0 * PI)).floor();
    let r = t - turns * 2.0 * PI;
    let c = (1.0 + rho) / (1.0 - rho);
    let base = if r == PI {
        0.5
    } else {
        (c * (r / 2.0).tan()).atan() / PI
    };
    turns + base
}

/// Continuous antiderivative of the von Mises density centred at 0, from its Fourier series.
fn vm_antiderivative(t: f64, kappa: f64) -> f64 {
    let ratios = bessel_ratios(kappa);
    let mut s = t / (2.0 * PI);
    for (p, r) in ratios.iter().enumerate() {
        let p = (p + 1) as f64;
        s += r * (p * t).sin() / (p * PI);
    }
    s
}

/// `I_p(kappa) / I_0(kappa)` for p = 1, 2, ... until negligible, by backward recurrence.
fn bessel_ratios(kappa: f64) -> Vec<f64> {
    if kappa == 0.0 {
        return Vec::new();
    }
    let n_terms = (30.0 + 12.0 * kappa.sqrt() + kappa.min(50.0)).ceil() as usize;
    // r[p] = I_p / I_{p-1} satisfies r_p = 1 / (2p / kappa + r_{p+1}).
    let mut r = vec![0.0; n_terms + 2];
    for p in (1..=n_terms).rev() {
        r[p] = 1.0 / (2.0 * p as f64 / kappa + r[p + 1]);
    }
    let mut out = Vec::with_capacity(n_terms);
    let mut prod = 1.0;
    for item in r.iter().take(n_terms + 1).skip(1) {
        prod *= item;
        if prod < 1e-18 {
            break;
        }
        out.push(prod);
    }
    out
}

/// `ln I_0(x)` for `x >= 0`.
pub fn log_bessel_i0(x: f64) -> f64 {
    if x < 20.0 {
        let q = x * x / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            term *= q / (k * k);
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
            k += 1.0;
        }
        sum.ln()
    } else {
        // I0(x) ~ e^x / sqrt(2 pi x) * sum_k ((2k-1)!!)^2 / (k! (8x)^k)
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..30 {
            let kf = k as f64;
            let next = term * (2.0 * kf - 1.0).powi(2) / (kf * 8.0 * x);
            if next.abs() > term.abs() {
                break;
            }
            term = next;
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        x - 0.5 * (2.0 * PI * x).ln() + sum.ln()
    }
}

/// Best-Fisher rejection sampler for the von Mises distribution centred at 0.
fn sample_von_mises_centered<R: Rng + ?Sized>(kappa: f64, rng: &mut R) -> f64 {
    if kappa < 1e-8 {
        return rng.random_range(-PI..PI);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        let u2: f64 = rng.random();
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random();
            let theta = f.clamp(-1.0, 1.0).acos();
            return if u3 > 0.5 { theta } else { -theta };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Representative parameters for each family, used by the property checks.
    fn representative(f: Family) -> Vec<f64> {
        match f {
            Family::Norm => vec![1.0, 2.0],
            Family::Gamma2 => vec![3.0, 2.0],
            Family::Pois => vec![4.5],
            Family::Exp => vec![0.7],
            Family::Beta => vec![2.0, 5.0],
            Family::Binom => vec![12.0, 0.3],
            Family::Nbinom => vec![3.0, 0.4],
            Family::Vm => vec![0.5, 2.0],
            Family::Wrpcauchy => vec![-0.3, 0.6],
            Family::Zipois => vec![3.0, 0.2],
            Family::Zigamma2 => vec![3.0, 2.0, 0.25],
        }
    }

    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    fn chunked(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let n = ((b - a).ceil() as usize).max(1);
        let h = (b - a) / n as f64;
        (0..n).map(|i| adaptive_simpson(f, a + i as f64 * h, a + (i + 1) as f64 * h, 1e-12)).sum()
    }

    #[test]
    fn log_pdf_reference_values() {
        let v = Family::Norm.log_pdf(0.0, &[0.0, 1.0]).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((Family::Pois.log_pdf(0.0, &[1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn gamma2_matches_shape_scale_form() {
        use statrs::distribution::{Continuous, Gamma as SGamma};
        let (m, s, z) = (3.0, 2.0, 3.0);
        // shape = m^2/s^2, rate = m/s^2
        let oracle = SGamma::new(m * m / (s * s), m / (s * s)).unwrap().ln_pdf(z);
        let v = Family::Gamma2.log_pdf(z, &[m, s]).unwrap();
        assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");
    }

    #[test]
    fn cdf_reference_values() {
        assert!((Family::Norm.cdf(1.5, &[1.5, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(Family::Exp.cdf(0.0, &[2.0]).unwrap(), 0.0);
        // wrapped Cauchy CDF against direct quadrature of the density
        for &(z, rho) in &[(0.0, 0.8), (1.0, 0.8), (-2.5, 0.3), (3.0, 0.95)] {
            let w = [0.0, rho];
            let f = |x: f64| Family::Wrpcauchy.log_pdf_unchecked(x, &w).exp();
            let oracle = adaptive_simpson(&f, -PI, z, 1e-12);
            let v = Family::Wrpcauchy.cdf(z, &w).unwrap();
            assert!((v - oracle).abs() < 1e-9, "z={z} rho={rho}: {v} vs {oracle}");
        }
        assert!((Family::Wrpcauchy.cdf(0.0, &[0.0, 0.8]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn vm_cdf_matches_quadrature() {
        for &(mu, kappa, z) in &[(0.0, 0.5, 1.0), (1.0, 4.0, 0.2), (-2.0, 30.0, -1.9), (2.5, 1.0, -3.0)] {
            let w = [mu, kappa];
            let f = |x: f64| Family::Vm.log_pdf_unchecked(x, &w).exp();
            let oracle = adaptive_simpson(&f, -PI, z, 1e-12);
            let v = Family::Vm.cdf(z, &w).unwrap();
            assert!((v - oracle).abs() < 1e-8, "{v} vs {oracle}");
        }
    }

    #[test]
    fn bessel_i0_is_continuous_across_branches() {
        let a = log_bessel_i0(20.0 - 1e-9);
        let b = log_bessel_i0(20.0);
        assert!((a - b).abs() < 1e-9);
        // I0(1) = 1.2660658777520082
        assert!((log_bessel_i0(1.0) - 1.266_065_877_752_008_2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn densities_integrate_to_one() {
        for f in Family::ALL {
            let w = representative(f);
            let total = match f.support() {
                Support::Counts => (0..400).map(|k| f.log_pdf_unchecked(k as f64, &w).exp()).sum::<f64>(),
                Support::Circle => adaptive_simpson(&|x| f.log_pdf_unchecked(x, &w).exp(), -PI, PI, 1e-10),
                Support::UnitInterval => adaptive_simpson(&|x| f.log_pdf_unchecked(x, &w).exp(), 1e-12, 1.0 - 1e-12, 1e-10),
                Support::Real => chunked(&|x| f.log_pdf_unchecked(x, &w).exp(), -40.0, 40.0),
                Support::Positive => chunked(&|x| f.log_pdf_unchecked(x, &w).exp(), 1e-12, 200.0),
                Support::NonNegative => w[2] + chunked(&|x| f.log_pdf_unchecked(x, &w).exp(), 1e-12, 200.0),
            };
            assert!((total - 1.0).abs() < 1e-6, "{f}: {total}");
        }
    }

    #[test]
    fn cdf_derivative_is_density() {
        for f in [Family::Norm, Family::Gamma2, Family::Exp, Family::Beta, Family::Vm, Family::Wrpcauchy, Family::Zigamma2] {
            let w = representative(f);
            let (lo, hi) = match f.support() {
                Support::Real => (-4.0, 6.0),
                Support::Circle => (-3.0, 3.0),
                Support::UnitInterval => (0.02, 0.9),
                _ => (0.1, 8.0),
            };
            for i in 0..20 {
                let z = lo + (hi - lo) * (i as f64 + 0.5) / 20.0;
                let h = 1e-5;
                let d = (f.cdf_unchecked(z + h, &w) - f.cdf_unchecked(z - h, &w)) / (2.0 * h);
                let p = f.log_pdf_unchecked(z, &w).exp();
                assert!(((d - p) / p).abs() < 1e-4, "{f} at {z}: {d} vs {p}");
            }
        }
    }

    #[test]
    fn cdf_is_nondecreasing_and_left_limits_mark_atoms() {
        for f in Family::ALL {
            let w = representative(f);
            let mut prev = 0.0;
            for i in 0..400 {
                let z = -4.0 + i as f64 * 0.05;
                let c = f.cdf_unchecked(z, &w);
                assert!(c + 1e-15 >= prev, "{f} at {z}");
                prev = c;
            }
        }
        let w = [3.0];
        let jump = Family::Pois.cdf_unchecked(2.0, &w) - Family::Pois.cdf_left_unchecked(2.0, &w);
        assert!((jump - Family::Pois.log_pdf_unchecked(2.0, &w).exp()).abs() < 1e-14);
        let w = [3.0, 2.0, 0.25];
        assert!((Family::Zigamma2.cdf_unchecked(0.0, &w) - 0.25).abs() < 1e-15);
        assert_eq!(Family::Zigamma2.cdf_left_unchecked(0.0, &w), 0.0);
    }

    #[test]
    fn samples_match_cdf() {
        let n = 100_000;
        for (i, f) in Family::ALL.iter().enumerate() {
            let w = representative(*f);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let mut xs: Vec<f64> = (0..n).map(|_| f.sample(&w, &mut rng).unwrap()).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut d: f64 = 0.0;
            let mut j = 0;
            while j < n {
                let x = xs[j];
                let mut k = j;
                while k < n && xs[k] == x {
                    k += 1;
                }
                let below = j as f64 / n as f64;
                let upto = k as f64 / n as f64;
                d = d.max((upto - f.cdf_unchecked(x, &w)).abs());
                d = d.max((below - f.cdf_left_unchecked(x, &w)).abs());
                j = k;
            }
            assert!(d < 0.01, "{f}: KS distance {d}");
        }
    }

    #[test]
    fn gamma2_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| Family::Gamma2.sample(&[15.0, 5.0], &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - 15.0).abs() < 0.1, "{mean}");
        assert!((sd - 5.0).abs() < 0.1, "{sd}");
    }

    #[test]
    fn total_zero_inflation_always_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_eq!(Family::Zipois.sample(&[4.0, 1.0], &mut rng).unwrap(), 0.0);
        }
    }

    #[test]
    fn fixed_seed_gives_identical_draws() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| Family::Vm.sample(&[0.2, 3.0], &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn link_reference_values() {
        assert_eq!(Link::Log.apply(1.0).unwrap(), 0.0);
        assert_eq!(Link::Logit.apply(0.5).unwrap(), 0.0);
        assert!(CIRCLE.apply(0.0).unwrap().abs() < 1e-15);
        assert!(Link::Logit.apply(1.0).is_err());
        assert!(Link::Logit.apply(0.0).is_err());
        assert!(Link::Log.apply(0.0).is_err());
    }

    #[test]
    fn domain_errors_and_unknown_names() {
        assert!(Family::Norm.log_pdf(0.0, &[0.0, -1.0]).is_err());
        assert!(Family::Wrpcauchy.cdf(0.0, &[0.0, 1.0]).is_err());
        let err = "gamma".parse::<Family>().unwrap_err().to_string();
        assert!(err.contains("gamma2") && err.contains("wrpcauchy"), "{err}");
    }

    #[test]
    fn wrpcauchy_concentration_is_clamped() {
        let rho = Family::Wrpcauchy.invert_one(1, 100.0);
        assert!(rho < 1.0);
        assert_eq!(rho, Family::Wrpcauchy.invert_one(1, WRPCAUCHY_ETA_CAP));
    }

    #[test]
    fn analytic_derivatives_match_differences() {
        let cases: [(Family, f64, &[f64]); 6] = [
            (Family::Norm, 0.7, &[-0.2, 1.3]),
            (Family::Pois, 4.0, &[2.5]),
            (Family::Exp, 0.4, &[1.7]),
            (Family::Binom, 3.0, &[8.0, 0.3]),
            (Family::Gamma2, 2.2, &[3.0, 1.5]),
            (Family::Gamma2, 0.3, &[1.0, 2.0]),
        ];
        for (f, z, w) in cases {
            for p in 0..f.n_params() {
                let Some(d) = f.dlog_pdf_deta(p, z, w) else { continue };
                let eta = f.links()[p].apply(w[p]).unwrap();
                let at = |e: f64| {
                    let mut v = w.to_vec();
                    v[p] = f.invert_one(p, e);
                    f.log_pdf_unchecked(z, &v)
                };
                let h = 1e-6;
                let fd = (at(eta + h) - at(eta - h)) / (2.0 * h);
                assert!((d - fd).abs() < 1e-6 * fd.abs().max(1.0), "{f} param {p}: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn log_pdf_is_smooth_in_parameters() {
        for f in Family::ALL {
            let w = representative(f);
            let eta = f.link_apply(&w).unwrap();
            let z = f.sample(&w, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            for k in 0..eta.len() {
                if !f.is_estimable(k) {
                    continue;
                }
                let at = |h: f64| {
                    let mut e = eta.clone();
                    e[k] += h;
                    f.log_pdf_unchecked(z, &f.link_invert(&e))
                };
                let (a, b, c) = (at(-1e-4), at(0.0), at(1e-4));
                assert!(a.is_finite() && b.is_finite() && c.is_finite());
                // second difference stays bounded: no jumps
                assert!((a - 2.0 * b + c).abs() < 1e-4, "{f} param {k}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn links_round_trip(x in -20.0f64..20.0, k in 0usize..11) {
            let f = Family::ALL[k];
            let w: Vec<f64> = f.links().iter().map(|l| l.invert(x.clamp(-14.0, 14.0) / 2.0)).collect();
            let eta = f.link_apply(&w).unwrap();
            let back = f.link_invert(&eta);
            for (a, b) in w.iter().zip(&back) {
                proptest::prop_assert!(((a - b) / a.abs().max(1e-300)).abs() < 1e-12 || (a - b).abs() < 1e-15);
            }
        }
    }
}
