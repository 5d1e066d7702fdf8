//! The log-moment function ψ and the recurrence regime of a walk.
//!
//! All expectations over the discrete laws are evaluated in closed form,
//! in log-sum-exp form, so the only numerical error in the derived
//! constants is the tolerance of the scalar searches.

use serde::{Deserialize, Serialize};

use crate::env::{validate_spec, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::numeric::{bisect, golden_section_min, log_sum_exp};

pub const DEFAULT_TOL: f64 = 1e-9;

/// Largest bracket tried when locating κ.
const KAPPA_CAP_LIMIT: f64 = 512.0;

/// `ψ(t) = log E[Σ_{i≤N} A_i^t] = log E[N] + log E[A^t]`.
pub fn psi(spec: &EnvironmentSpec, t: f64) -> f64 {
    spec.offspring.mean().ln() + log_moment(spec, t)
}

/// `log E[A^t]`.
fn log_moment(spec: &EnvironmentSpec, t: f64) -> f64 {
    log_sum_exp(spec.weights.atoms().map(|(a, p)| p.ln() + t * a.ln()))
}

/// `ψ'(t) = E[A^t log A] / E[A^t]`.
pub fn psi_prime(spec: &EnvironmentSpec, t: f64) -> f64 {
    let norm = log_moment(spec, t);
    spec.weights.atoms().map(|(a, p)| (p.ln() + t * a.ln() - norm).exp() * a.ln()).sum()
}

/// `χ = inf_{t∈[0,1]} ψ(t)`.
pub fn chi(spec: &EnvironmentSpec, tol: f64) -> f64 {
    golden_section_min(|t| psi(spec, t), 0.0, 1.0, tol).1
}

/// `κ = inf{t > 1 : ψ(t) = 0}`; `+∞` when ψ never returns to zero.
///
/// Only meaningful when ψ(1) = 0 and ψ'(1) < 0.
pub fn kappa(spec: &EnvironmentSpec, tol: f64) -> Result<f64> {
    let (p1, d1) = (psi(spec, 1.0), psi_prime(spec, 1.0));
    if p1.abs() > tol || d1 >= -tol {
        return Err(Error::Usage(format!("kappa needs psi(1) = 0 and psi'(1) < 0, got psi(1) = {p1}, psi'(1) = {d1}")));
    }
    if spec.weights.max_value() <= 1.0 {
        return Ok(f64::INFINITY);
    }
    let mut cap = 4.0;
    while psi(spec, cap) <= 0.0 {
        cap *= 2.0;
        if cap > KAPPA_CAP_LIMIT {
            return Err(Error::Config(format!("psi stays nonpositive up to t = {KAPPA_CAP_LIMIT}")));
        }
    }
    Ok(bisect(|t| psi(spec, t), 1.0, cap, tol, |v| v <= 0.0))
}

/// Asymptotic slope of `t ↦ ψ(-t)`, i.e. `log(1/a_min)`.
pub fn slope_at_infinity(spec: &EnvironmentSpec) -> f64 {
    -spec.weights.min_value().ln()
}

/// `J̃(a) = inf_{t≥0} {ψ(-t) - a t}`.
pub fn j_tilde(spec: &EnvironmentSpec, a: f64, tol: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::Usage(format!("j_tilde needs a > 0, got {a}")));
    }
    let s_inf = slope_at_infinity(spec);
    if (a - s_inf).abs() <= 1e-14 * s_inf.abs().max(1.0) {
        return Ok((spec.offspring.mean() * spec.weights.mass_at_min()).ln());
    }
    if a > s_inf {
        return Ok(f64::NEG_INFINITY);
    }
    let g = |t: f64| psi(spec, -t) - a * t;
    let slope = |t: f64| -psi_prime(spec, -t) - a;
    if slope(0.0) >= 0.0 {
        return Ok(g(0.0));
    }
    let mut hi = 1.0;
    while slope(hi) < 0.0 {
        hi *= 2.0;
    }
    Ok(golden_section_min(g, 0.0, hi, tol).1)
}

/// `γ̃ = sup{a : J̃(a) > 0}`, the speed of the maximal potential.
pub fn gamma_tilde(spec: &EnvironmentSpec, tol: f64) -> Result<f64> {
    let c = chi(spec, tol);
    if c > tol {
        return Err(Error::Usage(format!("gamma_tilde needs a recurrent environment, chi = {c}")));
    }
    let s_inf = slope_at_infinity(spec);
    if j_tilde(spec, s_inf, tol)? > 0.0 {
        return Ok(s_inf);
    }
    // J̃ is nonincreasing, J̃(0+) = ψ(0) > 0 and J̃(s∞) ≤ 0.
    let j = |a: f64| j_tilde(spec, a, tol).unwrap_or(f64::NEG_INFINITY);
    Ok(bisect(j, 0.0, s_inf, tol, |v| v > 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regime {
    Transient,
    /// χ < 0.
    PosRecChiNeg,
    /// χ = 0, ψ'(1) > 0.
    PosRecBoundary,
    /// χ = 0, ψ'(1) = 0.
    NullRecCritical,
    /// χ = 0, ψ'(1) < 0.
    NullRecSubdiffusive,
}

impl Regime {
    pub fn is_recurrent(self) -> bool {
        self != Regime::Transient
    }
}

/// Growth of the largest visited generation `X*_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum XStarScaling {
    LogN,
    LogNCubed,
    /// `n^ν`.
    Poly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedConstants {
    /// Limit of `R_n / log n`.
    pub r_limit: f64,
    /// Limit of `R̃_n / log n`, always `1/γ̃`.
    pub rtilde_limit: f64,
    /// Limit of `log ℓ(φ,n) / log n`.
    pub root_local_time_exponent: f64,
    pub xstar_scaling: XStarScaling,
    /// `1 - 1/min(κ,2)`; only in the sub-diffusive regime.
    pub nu: Option<f64>,
    /// `1/min(κ,2)`; only in the sub-diffusive regime.
    pub nu_prime: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub psi0: f64,
    pub psi1: f64,
    pub chi: f64,
    pub psi_prime_1: f64,
    /// Present in the sub-diffusive regime; `"inf"` in JSON when infinite.
    #[serde(with = "kappa_json")]
    pub kappa: Option<f64>,
    /// Present in the recurrent regimes.
    pub gamma_tilde: Option<f64>,
    pub regime: Regime,
    pub predicted: Option<PredictedConstants>,
}

mod kappa_json {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(k) if k.is_infinite() => s.serialize_str("inf"),
            Some(k) => s.serialize_f64(*k),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(k)) => Ok(Some(k)),
            Some(Repr::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!("bad kappa {t:?}"))),
        }
    }
}

/// Classifies the environment and fills in the predicted limit constants.
pub fn classify(spec: &EnvironmentSpec, tol: f64) -> Result<RegimeReport> {
    let report = validate_spec(spec);
    if !report.ok {
        return Err(Error::Config(format!("invalid environment: {}", report.violations.join("; "))));
    }
    let psi0 = psi(spec, 0.0);
    let psi1 = psi(spec, 1.0);
    let chi = chi(spec, tol);
    let psi_prime_1 = psi_prime(spec, 1.0);

    let regime = if chi > tol {
        Regime::Transient
    } else if chi < -tol {
        Regime::PosRecChiNeg
    } else if psi_prime_1 > tol {
        Regime::PosRecBoundary
    } else if psi_prime_1 >= -tol {
        Regime::NullRecCritical
    } else {
        Regime::NullRecSubdiffusive
    };

    let kappa = match regime {
        Regime::NullRecSubdiffusive => Some(kappa(spec, tol)?),
        _ => None,
    };
    let gamma_tilde = if regime.is_recurrent() { Some(gamma_tilde(spec, tol)?) } else { None };

    let predicted = gamma_tilde.map(|g| {
        let rtilde_limit = 1.0 / g;
        match regime {
            Regime::NullRecSubdiffusive => {
                let m = kappa.expect("set above").min(2.0);
                PredictedConstants {
                    r_limit: 1.0 / (g * m),
                    rtilde_limit,
                    root_local_time_exponent: 1.0 / m,
                    xstar_scaling: XStarScaling::Poly,
                    nu: Some(1.0 - 1.0 / m),
                    nu_prime: Some(1.0 / m),
                }
            }
            _ => PredictedConstants {
                r_limit: rtilde_limit,
                rtilde_limit,
                root_local_time_exponent: 1.0,
                xstar_scaling: if regime == Regime::PosRecChiNeg {
                    XStarScaling::LogN
                } else {
                    XStarScaling::LogNCubed
                },
                nu: None,
                nu_prime: None,
            },
        }
    });

    Ok(RegimeReport { psi0, psi1, chi, psi_prime_1, kappa, gamma_tilde, regime, predicted })
}
