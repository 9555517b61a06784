//! Deterministic limit constants of the strong laws.

use serde::{Deserialize, Serialize};

use crate::error::{FragError, Result};
use crate::functionals::{evaluate_mean, Characteristic, CostFunction, TestFunction};
use crate::models::{DislocationModel, Family, MassSplit};
use crate::quadrature::{integrate, integrate_to_infinity, QuadOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    Main,
    Energy,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClosedForm,
    Quadrature,
    RenewalOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitConstant {
    pub value: f64,
    pub theorem: Theorem,
    pub method: Method,
    pub error_estimate: f64,
}

const INNER: QuadOptions = QuadOptions {
    abs_tol: 1e-13,
    rel_tol: 1e-13,
    max_intervals: 4000,
};

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FragError::NonFinite(what.into()))
    }
}

/// `∫_0^1 ρ^{p*} E φ(ρ, s) dρ`, computed as `∫_0^∞ e^{−(1+p*)u} E φ(e^{−u}, s) du`.
pub fn rho_integral(phi: &dyn Characteristic, p_star: f64, split: &MassSplit) -> Result<(f64, f64)> {
    let mut cuts: Vec<f64> = phi
        .jumps(split)
        .into_iter()
        .filter(|x| *x > 0.0 && *x < 1.0)
        .map(|x| -x.ln())
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let q = 1.0 + p_star;
    let g = |u: f64| {
        let v = evaluate_mean(phi, (-u).exp(), split);
        if v == 0.0 {
            0.0
        } else {
            (-q * u).exp() * v
        }
    };
    let mut value = 0.0;
    let mut error = 0.0;
    let mut left = 0.0;
    for &c in &cuts {
        let r = integrate(g, left, c, INNER)?;
        value += r.value;
        error += r.error;
        left = c;
    }
    let r = integrate_to_infinity(g, left, INNER)?;
    value += r.value;
    error += r.error;
    Ok((finite(value, "inner rho-integral")?, error))
}

/// Limit of `η^{1+p*} Z^φ_η / Λ_η(p*)`:
/// `(1/Φ'(p*)) ∫ ∫_0^1 ρ^{p*} E φ(ρ, s) dρ ν(ds)`.
///
/// The time integral of `E Σ_k |Π_k(t)|^{1+p*}` over `(0, 1)` equals one
/// because `M(p*)` is a unit-mean martingale; the same constant is used for
/// every self-similarity index since the counted process depends on sizes only.
pub fn theorem_constant(
    model: &DislocationModel,
    p_star: f64,
    phi_prime_star: f64,
    phi: &dyn Characteristic,
) -> Result<LimitConstant> {
    let mut inner_err: f64 = 0.0;
    let mut failure = None;
    let outer = model.nu_integral_with(
        |s| match rho_integral(phi, p_star, s) {
            Ok((v, e)) => {
                inner_err = inner_err.max(e);
                v
            }
            Err(err) => {
                failure.get_or_insert(err);
                0.0
            }
        },
        &[],
        QuadOptions {
            abs_tol: 1e-12,
            rel_tol: 1e-13,
            max_intervals: 4000,
        },
    )?;
    if let Some(err) = failure {
        return Err(err);
    }
    let value = finite(outer.value / phi_prime_star, "theorem constant")?;
    let method = if matches!(model.family(), Family::DiracBinary { .. }) {
        Method::ClosedForm
    } else {
        Method::Quadrature
    };
    Ok(LimitConstant {
        value,
        theorem: Theorem::Main,
        method,
        error_estimate: (outer.error + inner_err * model.total_rate()) / phi_prime_star,
    })
}

/// Limit of `η^{p*−p} E_p(η) / Λ_η(p*)`: `∫ E ψ dν / (Φ'(p*)(p* − p))`.
pub fn energy_limit(
    model: &DislocationModel,
    p_star: f64,
    phi_prime_star: f64,
    psi: CostFunction,
    p: f64,
) -> Result<LimitConstant> {
    if p >= p_star {
        return Err(FragError::Domain { p, p_lower: p_star });
    }
    psi.validate()?;
    let nu = model.nu_integral(|s| psi.mean(s), &[])?;
    let closed = match psi {
        CostFunction::Const { .. } | CostFunction::Exponential { .. } => {
            !matches!(model.family(), Family::BetaBinary { .. })
        }
        CostFunction::MassPower { .. } => matches!(model.family(), Family::DiracBinary { .. }),
    };
    let scale = phi_prime_star * (p_star - p);
    Ok(LimitConstant {
        value: finite(nu.value / scale, "energy limit")?,
        theorem: Theorem::Energy,
        method: if closed { Method::ClosedForm } else { Method::Quadrature },
        error_estimate: nu.error / scale,
    })
}

/// `K(u) = ∫ Σ_k 1{s_k < u} s_k^{1+p*} ν(ds)`.
pub fn empirical_kernel(model: &DislocationModel, p_star: f64, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(FragError::InvalidParameter(format!("u = {u} must lie in (0, 1)")));
    }
    let q = 1.0 + p_star;
    let r = model.nu_integral_with(
        |s| s.fractions().iter().filter(|&&x| x < u).map(|x| x.powf(q)).sum(),
        &[u],
        INNER,
    )?;
    finite(r.value, "empirical kernel")
}

/// Limit of the stopping-line empirical mean divided by `Λ_η(p*)`:
/// `(1/Φ'(p*)) ∫_0^1 E f(u) K(u) du/u`.
pub fn empirical_limit(
    model: &DislocationModel,
    p_star: f64,
    phi_prime_star: f64,
    f: TestFunction,
) -> Result<LimitConstant> {
    f.validate()?;
    let breaks: Vec<f64> = match model.family() {
        Family::DiracBinary { b, b2 } => vec![b2, b],
        _ => Vec::new(),
    };
    let mut failure = None;
    let integrand = |u: f64| {
        if u <= 0.0 || u >= 1.0 {
            return 0.0;
        }
        let fu = f.mean(u);
        if fu == 0.0 {
            return 0.0;
        }
        match empirical_kernel(model, p_star, u) {
            Ok(k) => fu * k / u,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        }
    };
    let r = crate::quadrature::integrate_pieces(
        integrand,
        0.0,
        1.0,
        &breaks,
        QuadOptions {
            abs_tol: 1e-11,
            rel_tol: 1e-12,
            max_intervals: 4000,
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(LimitConstant {
        value: finite(r.value / phi_prime_star, "empirical limit")?,
        theorem: Theorem::Empirical,
        method: Method::Quadrature,
        error_estimate: r.error / phi_prime_star,
    })
}

/// Numerical screen of the integrability conditions a characteristic must
/// satisfy for the strong law. It flags suspicious growth; it does not prove
/// integrability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionPrecheck {
    /// `∫ sup_η η^{1+p*+β} E φ(η, s) ν(ds)` over the η-grid, per β.
    pub sup_integrals: Vec<(f64, f64)>,
    /// `η^{1+p̃} ∫ E φ(η, s) ν(ds)` along the η-grid for the chosen `p̃`.
    pub p_tilde: f64,
    pub tail_profile: Vec<(f64, f64)>,
    pub flagged: bool,
}

pub fn assumption_precheck(
    model: &DislocationModel,
    p_star: f64,
    phi: &dyn Characteristic,
) -> Result<AssumptionPrecheck> {
    let grid: Vec<f64> = (0..=40).map(|k| 2f64.powf(-0.5 * k as f64)).collect();
    let mut sup_integrals = Vec::new();
    let mut flagged = false;
    for beta in [0.05, 0.25, 1.0] {
        let r = model.nu_integral(
            |s| {
                grid.iter()
                    .map(|&eta| eta.powf(1.0 + p_star + beta) * evaluate_mean(phi, eta, s))
                    .fold(0.0, f64::max)
            },
            &[],
        );
        match r {
            Ok(v) if v.value.is_finite() => sup_integrals.push((beta, v.value)),
            _ => {
                flagged = true;
                sup_integrals.push((beta, f64::INFINITY));
            }
        }
    }
    let p_tilde = p_star - 0.5 * (p_star - model.p_lower_untruncated()).min(0.5);
    let mut tail_profile = Vec::new();
    for &eta in grid.iter().step_by(4) {
        let v = model
            .nu_integral(|s| evaluate_mean(phi, eta, s), &[])
            .map(|r| r.value * eta.powf(1.0 + p_tilde))
            .unwrap_or(f64::INFINITY);
        tail_profile.push((eta, v));
    }
    let n = tail_profile.len();
    let head_max = tail_profile[..n / 2].iter().map(|x| x.1).fold(0.0, f64::max);
    let tail_max = tail_profile[n / 2..].iter().map(|x| x.1).fold(0.0, f64::max);
    if !tail_max.is_finite() || tail_max > 10.0 * head_max.max(1e-300) {
        flagged = true;
    }
    Ok(AssumptionPrecheck {
        sup_integrals,
        p_tilde,
        tail_profile,
        flagged,
    })
}
