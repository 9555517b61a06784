//! Dislocation-measure families, the Laplace exponent Φ and the Malthusian
//! parameter.
//!
//! Every shipped family is binary: a dislocation replaces a block by at most
//! two fragments whose relative sizes are drawn from the family. For the
//! Beta family the measure has infinite total mass and is truncated to
//! `{s_1 ≤ 1 − ε}`; all rates, moments and samples then refer to the
//! truncated measure.

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{FragError, Result};
use crate::quadrature::{integrate_pieces, QuadOptions};
use crate::rng::StreamRng;

/// Relative fragment sizes produced by one dislocation, largest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MassSplit {
    fractions: SmallVec<[f64; 2]>,
}

impl MassSplit {
    /// Validates and wraps a split. Zero entries are dropped.
    pub fn new(fractions: impl IntoIterator<Item = f64>) -> Result<Self> {
        let fractions: SmallVec<[f64; 2]> = fractions.into_iter().filter(|s| *s != 0.0).collect();
        if fractions.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(FragError::InvalidParameter(format!(
                "split entries must lie in [0, 1]: {fractions:?}"
            )));
        }
        if fractions.windows(2).any(|w| w[0] < w[1]) {
            return Err(FragError::InvalidParameter(format!(
                "split must be nonincreasing: {fractions:?}"
            )));
        }
        let total: f64 = fractions.iter().sum();
        if total > 1.0 + 1e-12 {
            return Err(FragError::InvalidParameter(format!("split total {total} exceeds 1")));
        }
        if fractions.len() == 1 && fractions[0] == 1.0 {
            return Err(FragError::InvalidParameter(
                "the trivial split (1, 0, ...) is not a dislocation".into(),
            ));
        }
        Ok(Self { fractions })
    }

    pub(crate) fn binary(large: f64, small: f64) -> Self {
        debug_assert!(large >= small);
        let mut fractions = SmallVec::new();
        fractions.push(large);
        if small > 0.0 {
            fractions.push(small);
        }
        Self { fractions }
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn len(&self) -> usize {
        self.fractions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fractions.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.fractions.iter().sum()
    }

    /// Mass lost in the dislocation, `1 − Σ s_k`.
    pub fn deficit(&self) -> f64 {
        (1.0 - self.total()).max(0.0)
    }

    /// `Σ_k s_k^{1+p}`.
    pub fn power_sum(&self, p: f64) -> f64 {
        self.fractions.iter().map(|s| s.powf(1.0 + p)).sum()
    }

    /// Child masses for a parent of mass `parent`. When the fractions sum to
    /// one exactly, the last child receives the remainder so the children
    /// add back to the parent without rounding loss.
    pub fn scale(&self, parent: f64) -> SmallVec<[f64; 2]> {
        let mut out: SmallVec<[f64; 2]> = self.fractions.iter().map(|s| s * parent).collect();
        if self.total() == 1.0 && out.len() > 1 {
            let n = out.len();
            let head: f64 = out[..n - 1].iter().sum();
            out[n - 1] = parent - head;
        }
        out
    }
}

/// Family names accepted in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    DiracBinary,
    UniformBinary,
    DissipativeUniformBinary,
    BetaBinary,
}

impl std::str::FromStr for FamilyName {
    type Err = FragError;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| FragError::Config(format!("unknown family `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

/// Serializable model description: `{"family": ..., "params": {...}, "eps": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: FamilyName,
    #[serde(default)]
    pub params: FamilyParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// Point mass at the split `(b, b2)`.
    DiracBinary { b: f64, b2: f64 },
    /// `(B, 1 − B)` with `B` uniform on `(1/2, 1)`; a probability measure.
    UniformBinary,
    /// `(B, κ(1 − B))` with `B` uniform on `(1/2, 1)`.
    DissipativeUniformBinary { kappa: f64 },
    /// `(x, 1 − x)` with density `(1 − x)^{−1−γ}` on `[1/2, 1)`.
    BetaBinary { gamma: f64 },
}

/// A dislocation measure together with its truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DislocationModel {
    family: Family,
    truncation_eps: Option<f64>,
    total_rate: f64,
}

/// Result of a `ν`-integral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuIntegral {
    pub value: f64,
    pub error: f64,
}

/// Malthusian data of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MalthusianData {
    pub p_lower: f64,
    pub p_star: f64,
    pub phi_prime_at_star: f64,
    pub root_tol: f64,
}

pub const ROOT_TOL: f64 = 1e-10;
const PHI_TOL: f64 = 1e-10;

fn check_unit(name: &str, v: f64, lo_open: f64, hi_open: f64) -> Result<()> {
    if v.is_finite() && v > lo_open && v < hi_open {
        Ok(())
    } else {
        Err(FragError::InvalidParameter(format!(
            "{name} = {v} must lie in ({lo_open}, {hi_open})"
        )))
    }
}

impl DislocationModel {
    pub fn new(family: Family, truncation_eps: Option<f64>) -> Result<Self> {
        let (eps, total_rate) = match family {
            Family::DiracBinary { b, b2 } => {
                if !(b.is_finite() && b2.is_finite() && b2 >= 0.0 && b >= b2 && b < 1.0 && b > 0.0 && b + b2 <= 1.0) {
                    return Err(FragError::InvalidParameter(format!(
                        "dirac_binary needs 0 < b < 1, 0 ≤ b2 ≤ b, b + b2 ≤ 1 (got b = {b}, b2 = {b2})"
                    )));
                }
                (None, 1.0)
            }
            Family::UniformBinary => (None, 1.0),
            Family::DissipativeUniformBinary { kappa } => {
                check_unit("kappa", kappa, 0.0, 1.0)?;
                (None, 1.0)
            }
            Family::BetaBinary { gamma } => {
                check_unit("gamma", gamma, 0.0, 1.0)?;
                let eps = truncation_eps.ok_or_else(|| {
                    FragError::InvalidParameter("beta_binary has infinite total mass and needs a truncation eps".into())
                })?;
                check_unit("eps", eps, 0.0, 0.5)?;
                let rate = (eps.powf(-gamma) - 2f64.powf(gamma)) / gamma;
                (Some(eps), rate)
            }
        };
        Ok(Self {
            family,
            truncation_eps: eps,
            total_rate,
        })
    }

    pub fn dirac_binary(b: f64, b2: f64) -> Result<Self> {
        Self::new(Family::DiracBinary { b, b2 }, None)
    }

    pub fn uniform_binary() -> Self {
        Self::new(Family::UniformBinary, None).expect("parameter-free family")
    }

    pub fn dissipative_uniform_binary(kappa: f64) -> Result<Self> {
        Self::new(Family::DissipativeUniformBinary { kappa }, None)
    }

    pub fn beta_binary(gamma: f64, eps: f64) -> Result<Self> {
        Self::new(Family::BetaBinary { gamma }, Some(eps))
    }

    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let p = &spec.params;
        let need = |name: &str, v: Option<f64>| {
            v.ok_or_else(|| FragError::Config(format!("family {:?} needs parameter `{name}`", spec.family)))
        };
        let unused = |names: &[(&str, Option<f64>)]| -> Result<()> {
            for (n, v) in names {
                if v.is_some() {
                    return Err(FragError::Config(format!(
                        "parameter `{n}` does not apply to family {:?}",
                        spec.family
                    )));
                }
            }
            Ok(())
        };
        let family = match spec.family {
            FamilyName::DiracBinary => {
                unused(&[("kappa", p.kappa), ("gamma", p.gamma)])?;
                let b = need("b", p.b)?;
                Family::DiracBinary {
                    b,
                    b2: p.b2.unwrap_or(b),
                }
            }
            FamilyName::UniformBinary => {
                unused(&[("b", p.b), ("b2", p.b2), ("kappa", p.kappa), ("gamma", p.gamma)])?;
                Family::UniformBinary
            }
            FamilyName::DissipativeUniformBinary => {
                unused(&[("b", p.b), ("b2", p.b2), ("gamma", p.gamma)])?;
                Family::DissipativeUniformBinary {
                    kappa: need("kappa", p.kappa)?,
                }
            }
            FamilyName::BetaBinary => {
                unused(&[("b", p.b), ("b2", p.b2), ("kappa", p.kappa)])?;
                Family::BetaBinary {
                    gamma: need("gamma", p.gamma)?,
                }
            }
        };
        Self::new(family, spec.eps)
    }

    pub fn spec(&self) -> ModelSpec {
        let mut params = FamilyParams::default();
        let family = match self.family {
            Family::DiracBinary { b, b2 } => {
                params.b = Some(b);
                params.b2 = Some(b2);
                FamilyName::DiracBinary
            }
            Family::UniformBinary => FamilyName::UniformBinary,
            Family::DissipativeUniformBinary { kappa } => {
                params.kappa = Some(kappa);
                FamilyName::DissipativeUniformBinary
            }
            Family::BetaBinary { gamma } => {
                params.gamma = Some(gamma);
                FamilyName::BetaBinary
            }
        };
        ModelSpec {
            family,
            params,
            eps: self.truncation_eps,
        }
    }

    /// Returns the same family with a different truncation level.
    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Self::new(self.family, Some(eps))
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn truncation_eps(&self) -> Option<f64> {
        self.truncation_eps
    }

    /// Dislocation rate of a unit-mass block in the homogeneous chain.
    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    pub fn is_conservative(&self) -> bool {
        match self.family {
            Family::DiracBinary { b, b2 } => b + b2 == 1.0,
            Family::UniformBinary | Family::BetaBinary { .. } => true,
            Family::DissipativeUniformBinary { .. } => false,
        }
    }

    /// Left end of the domain of Φ for the (truncated) model.
    pub fn p_lower(&self) -> f64 {
        -1.0
    }

    /// Left end of the domain of Φ before truncation; `γ − 1` for the Beta
    /// family and `−1` otherwise.
    pub fn p_lower_untruncated(&self) -> f64 {
        match self.family {
            Family::BetaBinary { gamma } => gamma - 1.0,
            _ => -1.0,
        }
    }

    /// Draws a split from the truncated measure normalized by its total rate.
    pub fn sample_split(&self, rng: &mut StreamRng) -> MassSplit {
        match self.family {
            Family::DiracBinary { b, b2 } => MassSplit::binary(b, b2),
            Family::UniformBinary => {
                let x = 0.5 + 0.5 * rng.random::<f64>();
                MassSplit::binary(x, 1.0 - x)
            }
            Family::DissipativeUniformBinary { kappa } => {
                let x = 0.5 + 0.5 * rng.random::<f64>();
                MassSplit::binary(x, kappa * (1.0 - x))
            }
            Family::BetaBinary { gamma } => {
                let y = self.beta_quantile(gamma, rng.random::<f64>());
                MassSplit::binary(1.0 - y, y)
            }
        }
    }

    /// Inverse CDF of the small fragment `y = 1 − x` on `[ε, 1/2]`.
    fn beta_quantile(&self, gamma: f64, u: f64) -> f64 {
        let eps = self.truncation_eps.expect("validated at construction");
        let top = eps.powf(-gamma);
        let bottom = 2f64.powf(gamma);
        let y = (top - u * (top - bottom)).powf(-1.0 / gamma);
        y.clamp(eps, 0.5)
    }

    /// Distribution function of the large fragment under the normalized
    /// truncated Beta measure.
    pub fn beta_large_fragment_cdf(&self, x: f64) -> Option<f64> {
        let Family::BetaBinary { gamma } = self.family else {
            return None;
        };
        let eps = self.truncation_eps?;
        if x < 0.5 {
            return Some(0.0);
        }
        if x >= 1.0 - eps {
            return Some(1.0);
        }
        let y = 1.0 - x;
        let top = eps.powf(-gamma);
        let bottom = 2f64.powf(gamma);
        // P(Y ≥ y) = (y^{−γ} − 2^γ)/(ε^{−γ} − 2^γ)
        Some((y.powf(-gamma) - bottom) / (top - bottom))
    }

    fn check_domain(&self, p: f64) -> Result<()> {
        if p.is_finite() && p > self.p_lower() {
            Ok(())
        } else {
            Err(FragError::Domain {
                p,
                p_lower: self.p_lower(),
            })
        }
    }

    /// Laplace exponent `Φ(p) = ∫(1 − Σ s_n^{1+p}) ν(ds)`.
    pub fn phi(&self, p: f64) -> Result<f64> {
        self.check_domain(p)?;
        let q = 1.0 + p;
        let v = match self.family {
            Family::DiracBinary { b, b2 } => 1.0 - b.powf(q) - pow0(b2, q),
            Family::UniformBinary => p / (p + 2.0),
            Family::DissipativeUniformBinary { kappa } => {
                let a = 2.0 + p;
                let half_a = 2f64.powf(-a);
                1.0 - (2.0 * (1.0 - half_a) + 2.0 * kappa.powf(q) * half_a) / a
            }
            Family::BetaBinary { .. } => {
                self.beta_integral(|y| {
                    // 1 − (1−y)^q − y^q, written to avoid cancellation for small y
                    -(q * (-y).ln_1p()).exp_m1() - y.powf(q)
                })?
                .value
            }
        };
        finite(v, "phi")
    }

    /// `Φ'(p) = ∫ Σ s_n^{1+p} ln(1/s_n) ν(ds)`.
    pub fn phi_prime(&self, p: f64) -> Result<f64> {
        self.check_domain(p)?;
        let q = 1.0 + p;
        let v = match self.family {
            Family::DiracBinary { b, b2 } => {
                b.powf(q) * (-b.ln()) + if b2 > 0.0 { b2.powf(q) * (-b2.ln()) } else { 0.0 }
            }
            Family::UniformBinary => 2.0 / ((p + 2.0) * (p + 2.0)),
            Family::DissipativeUniformBinary { kappa } => {
                let a = 2.0 + p;
                let ln2 = std::f64::consts::LN_2;
                let half_a = 2f64.powf(-a);
                let da = 2.0 * (ln2 * half_a * a - (1.0 - half_a)) / (a * a);
                let big_b = 2.0 * kappa.powf(q) * half_a / a;
                let db = big_b * (kappa.ln() - ln2 - 1.0 / a);
                -da - db
            }
            Family::BetaBinary { .. } => {
                self.beta_integral(|y| {
                    let x = 1.0 - y;
                    x.powf(q) * -(-y).ln_1p() + y.powf(q) * -y.ln()
                })?
                .value
            }
        };
        finite(v, "phi_prime")
    }

    /// `∫ g(y) y^{−1−γ} dy` over `[ε, 1/2]`, computed in `z = ln y`.
    fn beta_integral<G: Fn(f64) -> f64>(&self, g: G) -> Result<NuIntegral> {
        let Family::BetaBinary { gamma } = self.family else {
            unreachable!("beta_integral on a non-Beta family")
        };
        let eps = self.truncation_eps.expect("validated at construction");
        let r = integrate_pieces(
            |z: f64| {
                let y = z.exp();
                g(y) * (-gamma * z).exp()
            },
            eps.ln(),
            0.5f64.ln(),
            &[],
            QuadOptions::with_abs(PHI_TOL * 1e-2),
        )?;
        Ok(NuIntegral {
            value: r.value,
            error: r.error,
        })
    }

    /// Integrates a split functional against the truncated measure.
    ///
    /// `size_breaks` lists fragment sizes at which `f` may jump (for example
    /// the level `u` of an indicator `1{s_k < u}`); quadrature panels are
    /// split there.
    pub fn nu_integral<F: FnMut(&MassSplit) -> f64>(&self, f: F, size_breaks: &[f64]) -> Result<NuIntegral> {
        self.nu_integral_with(f, size_breaks, QuadOptions::with_abs(1e-12))
    }

    pub fn nu_integral_with<F: FnMut(&MassSplit) -> f64>(
        &self,
        mut f: F,
        size_breaks: &[f64],
        opts: QuadOptions,
    ) -> Result<NuIntegral> {
        let out = match self.family {
            Family::DiracBinary { b, b2 } => NuIntegral {
                value: f(&MassSplit::binary(b, b2)),
                error: 0.0,
            },
            Family::UniformBinary => {
                let breaks: Vec<f64> = size_breaks.iter().flat_map(|&u| [u, 1.0 - u]).collect();
                let r = integrate_pieces(|x| 2.0 * f(&MassSplit::binary(x, 1.0 - x)), 0.5, 1.0, &breaks, opts)?;
                NuIntegral {
                    value: r.value,
                    error: r.error,
                }
            }
            Family::DissipativeUniformBinary { kappa } => {
                let breaks: Vec<f64> = size_breaks.iter().flat_map(|&u| [u, 1.0 - u / kappa]).collect();
                let r = integrate_pieces(
                    |x| 2.0 * f(&MassSplit::binary(x, kappa * (1.0 - x))),
                    0.5,
                    1.0,
                    &breaks,
                    opts,
                )?;
                NuIntegral {
                    value: r.value,
                    error: r.error,
                }
            }
            Family::BetaBinary { gamma } => {
                let eps = self.truncation_eps.expect("validated at construction");
                let breaks: Vec<f64> = size_breaks
                    .iter()
                    .flat_map(|&u| [u, 1.0 - u])
                    .filter(|y| *y > 0.0)
                    .map(f64::ln)
                    .collect();
                let r = integrate_pieces(
                    |z: f64| {
                        let y = z.exp();
                        f(&MassSplit::binary(1.0 - y, y)) * (-gamma * z).exp()
                    },
                    eps.ln(),
                    0.5f64.ln(),
                    &breaks,
                    opts,
                )?;
                NuIntegral {
                    value: r.value,
                    error: r.error,
                }
            }
        };
        if !out.value.is_finite() {
            return Err(FragError::NonFinite("nu_integral".into()));
        }
        Ok(out)
    }
}

fn pow0(x: f64, q: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.powf(q)
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FragError::NonFinite(what.into()))
    }
}

/// Finds the Malthusian parameter `p* ∈ (p̲, 0]` with `Φ(p*) = 0` by bisection.
pub fn solve_malthusian(model: &DislocationModel) -> Result<MalthusianData> {
    let p_lower = model.p_lower();
    if model.is_conservative() {
        return Ok(MalthusianData {
            p_lower,
            p_star: 0.0,
            phi_prime_at_star: model.phi_prime(0.0)?,
            root_tol: ROOT_TOL,
        });
    }
    let mut lo = p_lower + 1e-9;
    let mut hi = 0.0;
    let at_lower = model.phi(lo)?;
    let at_zero = model.phi(hi)?;
    if !(at_lower < 0.0 && at_zero >= 0.0) {
        return Err(FragError::NoRoot {
            lower: p_lower,
            at_lower,
            at_zero,
        });
    }
    let mut mid = 0.5 * (lo + hi);
    let mut value = model.phi(mid)?;
    for _ in 0..200 {
        if value == 0.0 || hi - lo <= 4.0 * f64::EPSILON {
            break;
        }
        if value < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        mid = 0.5 * (lo + hi);
        value = model.phi(mid)?;
    }
    if value.abs() > ROOT_TOL {
        return Err(FragError::NoRoot {
            lower: p_lower,
            at_lower,
            at_zero,
        });
    }
    Ok(MalthusianData {
        p_lower,
        p_star: mid,
        phi_prime_at_star: model.phi_prime(mid)?,
        root_tol: ROOT_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use crate::testkit::{ks_one_sample, mean_se};
    use proptest::prelude::*;

    fn shipped() -> Vec<DislocationModel> {
        vec![
            DislocationModel::dirac_binary(0.4, 0.4).unwrap(),
            DislocationModel::dirac_binary(0.5, 0.5).unwrap(),
            DislocationModel::uniform_binary(),
            DislocationModel::dissipative_uniform_binary(0.5).unwrap(),
            DislocationModel::beta_binary(0.5, 1e-2).unwrap(),
        ]
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn mass_split_validation() {
        assert!(MassSplit::new([0.3, 0.6]).is_err());
        assert!(MassSplit::new([0.7, 0.6]).is_err());
        assert!(MassSplit::new([1.2]).is_err());
        assert!(MassSplit::new([0.5, -0.1]).is_err());
        assert!(MassSplit::new([1.0, 0.0]).is_err());
        let s = MassSplit::new([0.6, 0.3, 0.0]).unwrap();
        assert_eq!(s.fractions(), &[0.6, 0.3]);
        assert!((s.deficit() - 0.1).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn scale_adds_back_to_parent(x in 0.5f64..1.0, m in 1e-9f64..1.0) {
            let s = MassSplit::binary(x, 1.0 - x);
            prop_assume!(s.total() == 1.0);
            let c = s.scale(m);
            prop_assert_eq!(c[0] + c[1], m);
        }
    }

    #[test]
    fn uniform_phi_closed_form_matches_quadrature() {
        let m = DislocationModel::uniform_binary();
        for i in 0..50 {
            let p = -0.95 + 2.95 * i as f64 / 49.0;
            let quad = m.nu_integral(|s| 1.0 - s.power_sum(p), &[]).unwrap().value;
            assert!((m.phi(p).unwrap() - quad).abs() < 1e-10, "p = {p}");
            assert!((m.phi(p).unwrap() - p / (p + 2.0)).abs() < 1e-15);
        }
        assert!((m.phi(1.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.phi_prime(0.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn closed_forms_match_generic_quadrature() {
        for m in shipped() {
            for p in [-0.5, 0.0, 0.7, 2.0] {
                let quad = m.nu_integral(|s| 1.0 - s.power_sum(p), &[]).unwrap().value;
                assert!((m.phi(p).unwrap() - quad).abs() < 1e-9, "{m:?} p = {p}");
                let dq = m
                    .nu_integral(|s| s.fractions().iter().map(|x| x.powf(1.0 + p) * -x.ln()).sum(), &[])
                    .unwrap()
                    .value;
                assert!((m.phi_prime(p).unwrap() - dq).abs() < 1e-9, "{m:?} p = {p}");
            }
        }
    }

    #[test]
    fn dirac_examples() {
        let m = DislocationModel::dirac_binary(0.4, 0.4).unwrap();
        assert!((m.phi(0.0).unwrap() - 0.2).abs() < 1e-15);
        let h = DislocationModel::dirac_binary(0.5, 0.5).unwrap();
        assert!((h.phi_prime(0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(DislocationModel::dirac_binary(0.3, 0.4).is_err());
        assert!(DislocationModel::dirac_binary(0.7, 0.4).is_err());
        assert!(DislocationModel::dirac_binary(1.0, 0.0).is_err());
    }

    #[test]
    fn conservative_phi_vanishes_at_zero() {
        for m in shipped().into_iter().filter(|m| m.is_conservative()) {
            assert!(m.phi(0.0).unwrap().abs() <= 1e-12, "{m:?}");
        }
    }

    #[test]
    fn phi_increasing_concave_and_derivative_consistent() {
        for m in shipped() {
            let lo = m.p_lower() + 0.1;
            let grid: Vec<f64> = (0..60).map(|i| lo + (2.0 - lo) * i as f64 / 59.0).collect();
            let vals: Vec<f64> = grid.iter().map(|&p| m.phi(p).unwrap()).collect();
            for w in vals.windows(2) {
                assert!(w[1] > w[0], "{m:?} not increasing");
            }
            for w in vals.windows(3) {
                assert!(w[2] - 2.0 * w[1] + w[0] <= 1e-8, "{m:?} not concave");
            }
            for &p in &grid {
                let h = 1e-5;
                let fd = (m.phi(p + h).unwrap() - m.phi(p - h).unwrap()) / (2.0 * h);
                let d = m.phi_prime(p).unwrap();
                assert!(d > 0.0);
                assert!((fd - d).abs() < 1e-6, "{m:?} p = {p}: {fd} vs {d}");
            }
        }
    }

    #[test]
    fn beta_goldens() {
        // Independent high-precision quadrature of the truncated density.
        let m = DislocationModel::beta_binary(0.5, 1e-2).unwrap();
        assert!(rel(m.total_rate(), 17.171_572_875_253_81) < 1e-13);
        let cases = [
            (1.0, 1.958_355_937_288_491_7, 1.204_746_981_150_663_4),
            (-0.5, -3.269_737_387_834_958, 11.573_213_272_383_853),
            (0.5, 1.238_017_616_118_414_4, 1.766_829_234_416_006_9),
            (-0.9, -12.340_387_286_750_708, 40.498_320_198_073_143),
        ];
        for (p, phi, dphi) in cases {
            assert!(rel(m.phi(p).unwrap(), phi) < 1e-10, "phi({p})");
            assert!(rel(m.phi_prime(p).unwrap(), dphi) < 1e-10, "phi'({p})");
        }
        assert!(rel(m.phi_prime(0.0).unwrap(), 3.569_772_374_413_756) < 1e-10);
        let k = m
            .nu_integral(|s| s.fractions().iter().filter(|&&x| x < 0.3).sum(), &[0.3])
            .unwrap()
            .value;
        assert!(rel(k, 0.895_445_115_010_332_2) < 1e-10);
    }

    #[test]
    fn domain_errors() {
        let m = DislocationModel::uniform_binary();
        assert!(matches!(m.phi(-1.0), Err(FragError::Domain { .. })));
        assert!(matches!(m.phi_prime(-2.0), Err(FragError::Domain { .. })));
        assert!(m.phi(f64::NAN).is_err());
        assert!(DislocationModel::beta_binary(1.5, 1e-2).is_err());
        assert!(DislocationModel::beta_binary(0.5, 0.0).is_err());
        assert!(DislocationModel::dissipative_uniform_binary(1.0).is_err());
    }

    #[test]
    fn malthusian_roots() {
        let u = solve_malthusian(&DislocationModel::uniform_binary()).unwrap();
        assert_eq!(u.p_star, 0.0);
        assert_eq!(u.phi_prime_at_star, 0.5);

        let d = solve_malthusian(&DislocationModel::dirac_binary(0.4, 0.4).unwrap()).unwrap();
        let exact = (0.5f64).ln() / (0.4f64).ln() - 1.0;
        assert!((d.p_star - exact).abs() < 1e-8);
        assert!((d.p_star - -0.243_529_202_633_969_92).abs() < 1e-9);
        assert!((d.phi_prime_at_star - 2.5f64.ln()).abs() < 1e-9);

        // Bisection oracle on the closed form, evaluated in high precision.
        let k = solve_malthusian(&DislocationModel::dissipative_uniform_binary(0.5).unwrap()).unwrap();
        assert!((k.p_star - -0.241_685_036_694_346_94).abs() < 1e-9);
        assert!((k.phi_prime_at_star - 0.611_228_715_862_015_3).abs() < 1e-9);

        for m in shipped() {
            let r = solve_malthusian(&m).unwrap();
            assert!(r.p_star <= 0.0 && r.p_star > r.p_lower);
            assert!(m.phi(r.p_star).unwrap().abs() <= r.root_tol);
            assert!(r.phi_prime_at_star > 0.0);
            if m.is_conservative() {
                assert_eq!(r.p_star, 0.0);
            }
        }
    }

    #[test]
    fn no_root_without_sign_change() {
        let m = DislocationModel::dirac_binary(0.5, 0.0).unwrap();
        assert!(matches!(solve_malthusian(&m), Err(FragError::NoRoot { .. })));
    }

    #[test]
    fn nu_integral_examples() {
        let u = DislocationModel::uniform_binary();
        assert!((u.nu_integral(|_| 1.0, &[]).unwrap().value - 1.0).abs() < 1e-14);
        let k = u
            .nu_integral(|s| s.fractions().iter().filter(|&&x| x < 0.3).sum(), &[0.3])
            .unwrap()
            .value;
        assert!((k - 0.09).abs() < 1e-13);
        let d = DislocationModel::dirac_binary(0.4, 0.4).unwrap();
        assert!((d.nu_integral(|s| s.total(), &[]).unwrap().value - 0.8).abs() < 1e-15);
    }

    #[test]
    fn dirac_sampler_is_deterministic() {
        let m = DislocationModel::dirac_binary(0.5, 0.5).unwrap();
        let mut rng = stream(3, 1, Purpose::Sampling);
        for _ in 0..10 {
            assert_eq!(m.sample_split(&mut rng).fractions(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn uniform_sampler_mean() {
        let m = DislocationModel::uniform_binary();
        let mut rng = stream(11, 1, Purpose::Sampling);
        let xs: Vec<f64> = (0..100_000).map(|_| m.sample_split(&mut rng).fractions()[0]).collect();
        let (mean, se) = mean_se(&xs);
        assert!((mean - 0.75).abs() < 3.0 * se, "{mean} ± {se}");
        assert!(xs.iter().all(|&x| (0.5..1.0).contains(&x)));
    }

    #[test]
    fn beta_sampler_matches_truncated_cdf() {
        let m = DislocationModel::beta_binary(0.5, 1e-2).unwrap();
        let mut rng = stream(5, 1, Purpose::Sampling);
        let xs: Vec<f64> = (0..20_000).map(|_| m.sample_split(&mut rng).fractions()[0]).collect();
        assert!(xs.iter().all(|&x| (0.5..0.99 + 1e-12).contains(&x)));
        let p = ks_one_sample(&xs, |x| m.beta_large_fragment_cdf(x).unwrap());
        assert!(p > 0.01, "KS p = {p}");
    }

    #[test]
    fn sampler_moments_match_phi() {
        for m in shipped() {
            let mut rng = stream(17, 2, Purpose::Sampling);
            for p in [0.5, -0.3] {
                let xs: Vec<f64> = (0..50_000).map(|_| m.sample_split(&mut rng).power_sum(p)).collect();
                let (mean, se) = mean_se(&xs);
                let expect = 1.0 - m.phi(p).unwrap() / m.total_rate();
                assert!(
                    (mean - expect).abs() <= 4.0 * se + 1e-12,
                    "{m:?} p = {p}: {mean} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn spec_round_trip_and_rejections() {
        for m in shipped() {
            let text = serde_json::to_string(&m.spec()).unwrap();
            let back: ModelSpec = serde_json::from_str(&text).unwrap();
            assert_eq!(DislocationModel::from_spec(&back).unwrap(), m);
        }
        let bad: std::result::Result<ModelSpec, _> = serde_json::from_str(r#"{"family":"uniform_binary","colour":1}"#);
        assert!(bad.is_err());
        let spec: ModelSpec = serde_json::from_str(r#"{"family":"uniform_binary","params":{"kappa":0.5}}"#).unwrap();
        assert!(DislocationModel::from_spec(&spec).is_err());
        let spec: ModelSpec = serde_json::from_str(r#"{"family":"beta_binary","params":{"gamma":0.5}}"#).unwrap();
        assert!(DislocationModel::from_spec(&spec).is_err());
        assert!("no_such_family".parse::<FamilyName>().is_err());
        assert_eq!("dirac_binary".parse::<FamilyName>().unwrap(), FamilyName::DiracBinary);
    }
}
