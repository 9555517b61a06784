//! Functionals of a simulated path: additive martingales, the process
//! counted with a random characteristic, fragmentation energy, empirical
//! means of the stopping line and threshold counts.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::engine::{neumaier, EventLog, StoppedState};
use crate::error::{FragError, Result};
use crate::models::MassSplit;
use crate::rng::{stream, Purpose, StreamRng};

/// A nonnegative random function `φ(x, split)` of the relative threshold
/// `x = η / parent mass` and the dislocation.
///
/// Implementations only need to be meaningful for `x ∈ (0, 1]`; callers go
/// through [`evaluate`], which enforces zero outside that range. Signed
/// characteristics are handled by splitting them into positive and negative
/// parts.
pub trait Characteristic: Send + Sync {
    fn eval(&self, x: f64, split: &MassSplit, rng: &mut StreamRng) -> f64;

    /// `E φ(x, split)` over the characteristic's own randomness.
    fn mean(&self, x: f64, split: &MassSplit) -> f64;

    fn descriptor(&self) -> String;

    /// Points of `(0, 1)` where `x ↦ φ(x, split)` may jump.
    fn jumps(&self, _split: &MassSplit) -> Vec<f64> {
        Vec::new()
    }
}

/// Evaluates `φ` with its support constraint: zero unless `x ∈ (0, 1]`.
pub fn evaluate(phi: &dyn Characteristic, x: f64, split: &MassSplit, rng: &mut StreamRng) -> f64 {
    if x > 0.0 && x <= 1.0 {
        phi.eval(x, split, rng)
    } else {
        0.0
    }
}

/// Mean of `φ` with the support constraint applied.
pub fn evaluate_mean(phi: &dyn Characteristic, x: f64, split: &MassSplit) -> f64 {
    if x > 0.0 && x <= 1.0 {
        phi.mean(x, split)
    } else {
        0.0
    }
}

/// Cost of a single dislocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostFunction {
    /// `ψ ≡ value`.
    Const { value: f64 },
    /// `ψ(s) = Σ_{k≥2} s_k^q`, the fragments split off the largest one.
    MassPower { q: f64 },
    /// `ψ = mean·W` with `W` standard exponential, drawn per dislocation.
    Exponential { mean: f64 },
}

impl CostFunction {
    pub fn eval(&self, split: &MassSplit, rng: &mut StreamRng) -> f64 {
        match *self {
            CostFunction::Exponential { mean } => {
                let w: f64 = rng.sample(Exp1);
                mean * w
            }
            _ => self.mean(split),
        }
    }

    pub fn mean(&self, split: &MassSplit) -> f64 {
        match *self {
            CostFunction::Const { value } => value,
            CostFunction::MassPower { q } => split.fractions().iter().skip(1).map(|s| s.powf(q)).sum(),
            CostFunction::Exponential { mean } => mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CostFunction::Const { value } => value.is_finite() && value >= 0.0,
            CostFunction::MassPower { q } => q.is_finite() && q > 0.0,
            CostFunction::Exponential { mean } => mean.is_finite() && mean >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(FragError::InvalidParameter(format!("invalid cost function {self:?}")))
        }
    }

    pub fn label(&self) -> String {
        match *self {
            CostFunction::Const { value } => format!("const({value})"),
            CostFunction::MassPower { q } => format!("mass_power({q})"),
            CostFunction::Exponential { mean } => format!("exponential({mean})"),
        }
    }
}

/// Test function `f` on `[0, 1]` for empirical means of the stopping line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    Const {
        value: f64,
    },
    /// `f(u) = u^q`.
    Power {
        q: f64,
    },
    /// `f(u) = W·u` with `W ~ mean·Exp(1)` drawn once per path.
    RandomLinear {
        mean: f64,
    },
}

/// One realization of a [`TestFunction`].
#[derive(Debug, Clone, Copy)]
pub struct TestFunctionDraw {
    f: TestFunction,
    scale: f64,
}

impl TestFunctionDraw {
    pub fn eval(&self, u: f64) -> f64 {
        match self.f {
            TestFunction::Const { value } => value,
            TestFunction::Power { q } => u.powf(q),
            TestFunction::RandomLinear { .. } => self.scale * u,
        }
    }
}

impl TestFunction {
    pub fn draw(&self, rng: &mut StreamRng) -> TestFunctionDraw {
        let scale = match *self {
            TestFunction::RandomLinear { mean } => {
                let w: f64 = rng.sample(Exp1);
                mean * w
            }
            _ => 1.0,
        };
        TestFunctionDraw { f: *self, scale }
    }

    pub fn mean(&self, u: f64) -> f64 {
        match *self {
            TestFunction::Const { value } => value,
            TestFunction::Power { q } => u.powf(q),
            TestFunction::RandomLinear { mean } => mean * u,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TestFunction::Const { value } => value.is_finite() && value >= 0.0,
            TestFunction::Power { q } => q.is_finite() && q >= 0.0,
            TestFunction::RandomLinear { mean } => mean.is_finite() && mean >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(FragError::InvalidParameter(format!("invalid test function {self:?}")))
        }
    }

    pub fn label(&self) -> String {
        match *self {
            TestFunction::Const { value } => format!("const({value})"),
            TestFunction::Power { q } => format!("power({q})"),
            TestFunction::RandomLinear { mean } => format!("random_linear({mean})"),
        }
    }
}

/// `φ(x, s) = x^{−(1+p)} ψ(s)`; counting with it reproduces the energy.
#[derive(Debug, Clone, Copy)]
pub struct EnergyCharacteristic {
    pub psi: CostFunction,
    pub p: f64,
}

impl Characteristic for EnergyCharacteristic {
    fn eval(&self, x: f64, split: &MassSplit, rng: &mut StreamRng) -> f64 {
        x.powf(-(1.0 + self.p)) * self.psi.eval(split, rng)
    }

    fn mean(&self, x: f64, split: &MassSplit) -> f64 {
        x.powf(-(1.0 + self.p)) * self.psi.mean(split)
    }

    fn descriptor(&self) -> String {
        format!("energy(psi={},p={})", self.psi.label(), self.p)
    }
}

/// `φ(x, s) = Σ_k 1{s_k < x ≤ 1} x^{−(1+p*)} s_k^{1+p*} f(s_k / x)`; counting
/// with it reproduces the empirical mean of the stopping line.
///
/// The counted process draws a fresh `f` per dislocation, whereas
/// [`empirical_mean`] uses a single draw per path; the two agree exactly for
/// deterministic `f`.
#[derive(Debug, Clone, Copy)]
pub struct EmpiricalCharacteristic {
    pub f: TestFunction,
    pub p_star: f64,
}

impl Characteristic for EmpiricalCharacteristic {
    fn eval(&self, x: f64, split: &MassSplit, rng: &mut StreamRng) -> f64 {
        let f = self.f.draw(rng);
        let q = 1.0 + self.p_star;
        split
            .fractions()
            .iter()
            .filter(|&&s| s < x)
            .map(|&s| (s / x).powf(q) * f.eval(s / x))
            .sum()
    }

    fn mean(&self, x: f64, split: &MassSplit) -> f64 {
        let q = 1.0 + self.p_star;
        split
            .fractions()
            .iter()
            .filter(|&&s| s < x)
            .map(|&s| (s / x).powf(q) * self.f.mean(s / x))
            .sum()
    }

    fn descriptor(&self) -> String {
        format!("empirical(f={},p_star={})", self.f.label(), self.p_star)
    }

    fn jumps(&self, split: &MassSplit) -> Vec<f64> {
        split
            .fractions()
            .iter()
            .copied()
            .filter(|s| *s > 0.0 && *s < 1.0)
            .collect()
    }
}

/// `φ ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroCharacteristic;

impl Characteristic for ZeroCharacteristic {
    fn eval(&self, _: f64, _: &MassSplit, _: &mut StreamRng) -> f64 {
        0.0
    }
    fn mean(&self, _: f64, _: &MassSplit) -> f64 {
        0.0
    }
    fn descriptor(&self) -> String {
        "zero".into()
    }
}

/// Deterministic characteristic from a closure.
pub struct FnCharacteristic<F> {
    pub name: String,
    pub f: F,
}

impl<F> Characteristic for FnCharacteristic<F>
where
    F: Fn(f64, &MassSplit) -> f64 + Send + Sync,
{
    fn eval(&self, x: f64, split: &MassSplit, _: &mut StreamRng) -> f64 {
        (self.f)(x, split)
    }
    fn mean(&self, x: f64, split: &MassSplit) -> f64 {
        (self.f)(x, split)
    }
    fn descriptor(&self) -> String {
        self.name.clone()
    }
}

/// A functional evaluated at one threshold, with its normalized value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalValue {
    pub value: f64,
    pub eta: f64,
    /// Human-readable normalizing factor, e.g. `eta^(p*-p)`.
    pub normalization: String,
    pub normalized: f64,
}

/// `Λ_η(p) = Σ_k λ_{η,k}^{1+p}`.
pub fn lambda_mart(state: &StoppedState, p: f64) -> f64 {
    let q = 1.0 + p;
    neumaier(state.blocks.iter().map(|b| b.mass.powf(q)))
}

/// Additive martingale `Σ_k m_k(t)^{1+p} e^{Φ(p) t}`, stopped at the log's
/// stopping line: a block frozen at time `τ ≤ t` contributes
/// `m^{1+p} e^{Φ(p) τ}`. With no frozen block before `t` this is `M_t(p)`.
pub fn m_mart(log: &EventLog, t: f64, p: f64, phi_p: f64) -> Result<f64> {
    let q = 1.0 + p;
    let blocks = log.live_blocks(t)?;
    Ok(neumaier(blocks.iter().map(|b| {
        let tau = if b.mass < log.eta { b.birth_time.min(t) } else { t };
        b.mass.powf(q) * (phi_p * tau).exp()
    })))
}

/// Process counted with `φ`: `Z^φ_η = Σ φ^{(i)}(η / m_i, s_i)` over all
/// dislocations of blocks of mass `m_i ≥ η`. Each dislocation gets its own
/// copy of `φ`, driven by the stream keyed by `(seed, parent id)`.
pub fn counted_process(log: &EventLog, phi: &dyn Characteristic, eta: f64, seed: u64) -> Result<FunctionalValue> {
    if log.eta > eta {
        return Err(FragError::IncompleteHorizon(format!(
            "log was simulated to eta = {}, coarser than requested {eta}",
            log.eta
        )));
    }
    if let Some(b) = log.pending.iter().find(|b| b.mass >= eta) {
        return Err(FragError::IncompleteHorizon(format!(
            "block {} of mass {} had not split by the time limit",
            b.id, b.mass
        )));
    }
    let value = neumaier(
        log.events
            .iter()
            .filter(|e| e.parent_mass >= eta && e.parent_mass > 0.0)
            .map(|e| {
                let mut rng = stream(seed, e.parent_id, Purpose::Characteristic);
                evaluate(phi, eta / e.parent_mass, &e.split, &mut rng)
            }),
    );
    if !value.is_finite() {
        return Err(FragError::NonFinite("counted process".into()));
    }
    Ok(FunctionalValue {
        value,
        eta,
        normalization: "1".into(),
        normalized: value,
    })
}

/// Rescales a counted value by `η^{1+p*}`.
pub fn normalize_counted(z: &FunctionalValue, p_star: f64) -> FunctionalValue {
    FunctionalValue {
        value: z.value,
        eta: z.eta,
        normalization: "eta^(1+p*)".into(),
        normalized: z.value * z.eta.powf(1.0 + p_star),
    }
}

/// Fragmentation energy `E_p(η) = Σ m_i^{1+p} ψ(s_i)` over dislocations of
/// blocks of mass `m_i ≥ η`, normalized by `η^{p*−p}`.
///
/// Computed as the counted process with [`EnergyCharacteristic`], so the
/// normalized value is bit-identical to `η^{1+p*} Z^φ_η`.
pub fn energy(log: &EventLog, psi: CostFunction, p: f64, eta: f64, p_star: f64, seed: u64) -> Result<FunctionalValue> {
    if p >= p_star {
        return Err(FragError::Domain { p, p_lower: p_star });
    }
    let z = counted_process(log, &EnergyCharacteristic { psi, p }, eta, seed)?;
    Ok(FunctionalValue {
        value: z.value * eta.powf(1.0 + p),
        eta,
        normalization: "eta^(p*-p)".into(),
        normalized: normalize_counted(&z, p_star).normalized,
    })
}

/// Direct sum `Σ m_i^{1+p} ψ(s_i)`, independent of the counted-process route.
pub fn energy_direct(log: &EventLog, psi: CostFunction, p: f64, eta: f64, seed: u64) -> f64 {
    neumaier(log.events.iter().filter(|e| e.parent_mass >= eta).map(|e| {
        let mut rng = stream(seed, e.parent_id, Purpose::Characteristic);
        e.parent_mass.powf(1.0 + p) * psi.eval(&e.split, &mut rng)
    }))
}

/// Empirical mean `Σ_k λ_{η,k}^{1+p*} f(λ_{η,k} / η)`; `f` is drawn once per
/// path from the stream keyed by `seed`.
pub fn empirical_mean(state: &StoppedState, f: TestFunction, p_star: f64, seed: u64) -> f64 {
    let draw = f.draw(&mut stream(seed, 0, Purpose::Characteristic));
    let q = 1.0 + p_star;
    neumaier(
        state
            .blocks
            .iter()
            .map(|b| b.mass.powf(q) * draw.eval(b.mass / state.eta)),
    )
}

/// `T_{η,ρ}`: number of frozen blocks of mass at least `ηρ`.
pub fn count_t(state: &StoppedState, rho: f64) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(FragError::InvalidParameter(format!("rho = {rho} must lie in (0, 1]")));
    }
    let level = state.eta * rho;
    Ok(state.blocks.iter().filter(|b| b.mass >= level).count())
}

/// Upper bound `(ηρ)^{−(1+p*)} Λ_η(p*)` for [`count_t`].
pub fn count_t_bound(state: &StoppedState, rho: f64, p_star: f64) -> f64 {
    (state.eta * rho).powf(-(1.0 + p_star)) * lambda_mart(state, p_star)
}
