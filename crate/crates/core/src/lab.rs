//! Replicated Monte Carlo experiments with pass/fail verdicts.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

use crate::engine::{neumaier, simulate, EventLog, SimOptions, StoppedState, DEFAULT_EVENT_BUDGET};
use crate::error::{FragError, Result};
use crate::functionals::{
    count_t, count_t_bound, empirical_mean, energy, lambda_mart, m_mart, Characteristic, CostFunction,
    EmpiricalCharacteristic, EnergyCharacteristic, TestFunction,
};
use crate::limits::{empirical_limit, energy_limit, LimitConstant};
use crate::models::{solve_malthusian, DislocationModel, Family, MalthusianData, ModelSpec};
use crate::rng::split_seed;

pub const CONFIG_VERSION: u32 = 1;
pub const REPORT_SCHEMA: &str = "fragsim.report.v1";
pub const TRACE_COLUMNS: [&str; 6] = [
    "replica",
    "eta",
    "functional",
    "value",
    "normalized_value",
    "lambda_mart",
];

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_budget() -> u64 {
    DEFAULT_EVENT_BUDGET
}

/// One functional to evaluate on every replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalSpec {
    /// `η^{p*−p} E_p(η)`.
    Energy { psi: CostFunction, p: f64 },
    /// `Σ_k λ_{η,k}^{1+p*} f(λ_{η,k}/η)`.
    Empirical { f: TestFunction },
    /// `Λ_η(p)`, with `p = p*` when omitted.
    Lambda {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p: Option<f64>,
    },
    /// Stopped additive martingale at the listed times.
    MMart {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p: Option<f64>,
        times: Vec<f64>,
    },
    /// `T_{η,ρ}` and its bound.
    CountT { rho: f64 },
    /// Last time a block of mass `≥ η` splits, against `−ln η`.
    Sigma,
}

impl FunctionalSpec {
    pub fn label(&self, p_star: f64) -> String {
        match self {
            FunctionalSpec::Energy { psi, p } => format!("energy(psi={},p={p})", psi.label()),
            FunctionalSpec::Empirical { f } => format!("empirical(f={})", f.label()),
            FunctionalSpec::Lambda { p } => format!("lambda(p={})", p.unwrap_or(p_star)),
            FunctionalSpec::MMart { p, .. } => format!("m_mart(p={})", p.unwrap_or(p_star)),
            FunctionalSpec::CountT { rho } => format!("count_t(rho={rho})"),
            FunctionalSpec::Sigma => "sigma".into(),
        }
    }

    /// Characteristic whose counted process reproduces this functional, for
    /// the functionals that have one.
    pub fn characteristic(&self, p_star: f64) -> Option<Box<dyn Characteristic>> {
        match *self {
            FunctionalSpec::Energy { psi, p } => Some(Box::new(EnergyCharacteristic { psi, p })),
            FunctionalSpec::Empirical { f } => Some(Box::new(EmpiricalCharacteristic { f, p_star })),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Width of "within k SE" checks.
    pub se_multiplier: f64,
    /// Fraction of paths that must contract toward the constant.
    pub contraction_fraction: f64,
    /// Largest tolerated fraction of failed replicas.
    pub quarantine_fraction: f64,
    /// Absolute tolerance for identities that hold path by path.
    pub exact_tol: f64,
    /// Number of replica batches for standard errors; one replica per batch when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batches: Option<usize>,
    /// Level of the Spearman trend test on `σ_η / (−ln η)`.
    pub trend_level: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            se_multiplier: 4.0,
            contraction_fraction: 0.9,
            quarantine_fraction: 0.01,
            exact_tol: 1e-9,
            batches: None,
            trend_level: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub model: ModelSpec,
    #[serde(default)]
    pub alpha: f64,
    pub eta_grid: Vec<f64>,
    pub replicas: usize,
    pub master_seed: u64,
    pub functionals: Vec<FunctionalSpec>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_budget")]
    pub event_budget: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| FragError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FragError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        if self.eta_grid.is_empty() {
            return bad("eta_grid must not be empty".into());
        }
        if self.eta_grid.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return bad("eta_grid entries must lie in (0, 1)".into());
        }
        if self.eta_grid.windows(2).any(|w| w[1] >= w[0]) {
            return bad("eta_grid must be strictly decreasing".into());
        }
        if self.replicas < 2 {
            return bad("replicas must be at least 2".into());
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        let t = &self.tolerances;
        let positive = [
            t.se_multiplier,
            t.contraction_fraction,
            t.quarantine_fraction,
            t.exact_tol,
            t.trend_level,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("tolerances must be positive and finite".into());
        }
        if t.contraction_fraction > 1.0 || t.trend_level >= 1.0 {
            return bad("contraction_fraction and trend_level must be at most 1".into());
        }
        if let Some(b) = t.batches {
            if b < 2 || b > self.replicas {
                return bad(format!("batches must lie in [2, replicas], got {b}"));
            }
        }
        if self.event_budget == 0 {
            return bad("event_budget must be positive".into());
        }
        DislocationModel::from_spec(&self.model)?;
        for f in &self.functionals {
            match f {
                FunctionalSpec::Energy { psi, p } => {
                    psi.validate()?;
                    if !p.is_finite() {
                        return bad("energy p must be finite".into());
                    }
                }
                FunctionalSpec::Empirical { f } => f.validate()?,
                FunctionalSpec::CountT { rho } => {
                    if !(*rho > 0.0 && *rho <= 1.0) {
                        return bad(format!("count_t rho = {rho} must lie in (0, 1]"));
                    }
                }
                FunctionalSpec::MMart { times, .. } => {
                    if times.is_empty() || times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
                        return bad("m_mart times must be nonnegative and finite".into());
                    }
                }
                FunctionalSpec::Lambda { .. } | FunctionalSpec::Sigma => {}
            }
        }
        Ok(())
    }

    pub fn min_eta(&self) -> f64 {
        *self.eta_grid.last().expect("validated grid")
    }

    pub fn replica_seed(&self, replica: usize) -> u64 {
        split_seed(self.master_seed, replica as u64)
    }
}

/// Summary of one functional at one level of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    /// Threshold `η`, or the time `t` for the martingale `M_t`.
    pub eta: f64,
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    pub min: f64,
    pub max: f64,
    /// Per-path ratio of the normalized value to `Λ_η(p*)`.
    pub ratio_mean: f64,
    pub ratio_median: f64,
    pub ratio_q1: f64,
    pub ratio_q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalReport {
    pub label: String,
    pub spec: FunctionalSpec,
    /// Predicted limit of the normalized mean (and of the per-path ratio).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant: Option<LimitConstant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub levels: Vec<LevelStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// Stable identifier of the check, e.g. `in_mean`.
    pub criterion: String,
    pub functional: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    pub replica: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    pub seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub replica: usize,
    pub eta: f64,
    pub functional: String,
    pub value: f64,
    pub normalized_value: f64,
    pub lambda_mart: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub config: ExperimentConfig,
    pub malthusian: MalthusianData,
    pub functionals: Vec<FunctionalReport>,
    pub verdicts: Vec<Verdict>,
    pub quarantined: Vec<Quarantined>,
    pub passed: bool,
    /// Wall-clock data; the only part of a report that is not reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime: Option<RuntimeInfo>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl ExperimentReport {
    pub fn functional(&self, label_prefix: &str) -> Option<&FunctionalReport> {
        self.functionals.iter().find(|f| f.label.starts_with(label_prefix))
    }

    pub fn failed_verdicts(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.iter().filter(|v| !v.passed)
    }

    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        out.write_record(TRACE_COLUMNS)?;
        for r in &self.trace {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Per-replica values of one functional at one level, in replica order.
    pub fn values(&self, label: &str, eta: f64) -> Vec<&TraceRow> {
        self.trace
            .iter()
            .filter(|r| r.functional == label && r.eta == eta)
            .collect()
    }
}

/// Everything measured on one replica.
#[derive(Debug, Clone)]
struct ReplicaData {
    replica: usize,
    /// `Λ_η(p*)` per grid point.
    lambda_star: Vec<f64>,
    /// `[functional][level] -> (value, normalized)`.
    values: Vec<Vec<(f64, f64)>>,
    /// Worst `T / bound` over the grid for each count functional.
    count_ok: Vec<bool>,
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    model: DislocationModel,
    mal: MalthusianData,
}

fn levels(spec: &FunctionalSpec, cfg: &ExperimentConfig) -> Vec<f64> {
    match spec {
        FunctionalSpec::MMart { times, .. } => times.clone(),
        _ => cfg.eta_grid.clone(),
    }
}

fn run_replica(ctx: &Context, replica: usize) -> Result<ReplicaData> {
    let cfg = ctx.cfg;
    let seed = cfg.replica_seed(replica);
    let opts = SimOptions {
        event_budget: cfg.event_budget,
        ..SimOptions::stopped(cfg.alpha, cfg.min_eta())
    };
    let log = simulate(&ctx.model, opts, seed)?;
    evaluate_log(ctx, &log, replica)
}

fn evaluate_log(ctx: &Context, log: &EventLog, replica: usize) -> Result<ReplicaData> {
    let cfg = ctx.cfg;
    let p_star = ctx.mal.p_star;
    let seed = cfg.replica_seed(replica);
    let states: Vec<StoppedState> = cfg
        .eta_grid
        .iter()
        .map(|&e| log.stopped_state(e))
        .collect::<Result<_>>()?;
    let lambda_star: Vec<f64> = states.iter().map(|s| lambda_mart(s, p_star)).collect();
    let mut values = Vec::with_capacity(cfg.functionals.len());
    let mut count_ok = Vec::new();
    for (fi, spec) in cfg.functionals.iter().enumerate() {
        let fseed = split_seed(seed, fi as u64 + 1);
        let row: Vec<(f64, f64)> = match spec {
            FunctionalSpec::Energy { psi, p } => cfg
                .eta_grid
                .iter()
                .map(|&eta| energy(log, *psi, *p, eta, p_star, fseed).map(|v| (v.value, v.normalized)))
                .collect::<Result<_>>()?,
            FunctionalSpec::Empirical { f } => states
                .iter()
                .map(|s| {
                    let v = empirical_mean(s, *f, p_star, fseed);
                    (v, v)
                })
                .collect(),
            FunctionalSpec::Lambda { p } => states
                .iter()
                .map(|s| {
                    let v = lambda_mart(s, p.unwrap_or(p_star));
                    (v, v)
                })
                .collect(),
            FunctionalSpec::MMart { p, times } => {
                let p = p.unwrap_or(p_star);
                let phi_p = ctx.model.phi(p)?;
                times
                    .iter()
                    .map(|&t| m_mart(log, t, p, phi_p).map(|v| (v, v)))
                    .collect::<Result<_>>()?
            }
            FunctionalSpec::CountT { rho } => {
                let mut ok = true;
                let mut row = Vec::new();
                let mut sup_normalized: f64 = 0.0;
                let mut sup_lambda: f64 = 0.0;
                for (s, &lam) in states.iter().zip(&lambda_star) {
                    let t = count_t(s, *rho)? as f64;
                    let bound = count_t_bound(s, *rho, p_star);
                    ok &= t <= bound * (1.0 + 1e-12);
                    let normalized = s.eta.powf(1.0 + p_star) * t;
                    sup_normalized = sup_normalized.max(normalized);
                    sup_lambda = sup_lambda.max(lam);
                    row.push((t, normalized));
                }
                ok &= sup_normalized <= rho.powf(-(1.0 + p_star)) * sup_lambda * (1.0 + 1e-12);
                count_ok.push(ok);
                row
            }
            FunctionalSpec::Sigma => cfg
                .eta_grid
                .iter()
                .map(|&eta| log.first_passage_sigma(eta).map(|s| (s, s / -eta.ln())))
                .collect::<Result<_>>()?,
        };
        values.push(row);
    }
    Ok(ReplicaData {
        replica,
        lambda_star,
        values,
        count_ok,
    })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and batch standard error of `xs` (taken in replica order).
pub fn batch_mean_se(xs: &[f64], batches: Option<usize>) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = neumaier(xs.iter().copied()) / n as f64;
    let nb = batches.unwrap_or(n).min(n);
    if nb < 2 {
        return (mean, f64::NAN);
    }
    let means: Vec<f64> = (0..nb)
        .map(|b| {
            let lo = b * n / nb;
            let hi = (b + 1) * n / nb;
            neumaier(xs[lo..hi].iter().copied()) / (hi - lo) as f64
        })
        .collect();
    let mm = neumaier(means.iter().copied()) / nb as f64;
    let var = neumaier(means.iter().map(|m| (m - mm).powi(2))) / (nb - 1) as f64;
    (mean, (var / nb as f64).sqrt())
}

/// Spearman rank correlation; ties get average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Upper-tail probability of a mean-zero Student t statistic.
fn t_upper(t: f64, dof: f64) -> f64 {
    match StudentsT::new(0.0, 1.0, dof) {
        Ok(d) => 1.0 - d.cdf(t),
        Err(_) => f64::NAN,
    }
}

fn is_lattice(model: &DislocationModel) -> bool {
    matches!(model.family(), Family::DiracBinary { .. })
}

fn constant_for(ctx: &Context, spec: &FunctionalSpec) -> Result<(Option<LimitConstant>, Option<String>)> {
    let m = &ctx.mal;
    Ok(match spec {
        FunctionalSpec::Energy { psi, p } => {
            if *p >= m.p_star {
                return Err(FragError::Domain {
                    p: *p,
                    p_lower: m.p_star,
                });
            }
            (
                Some(energy_limit(&ctx.model, m.p_star, m.phi_prime_at_star, *psi, *p)?),
                None,
            )
        }
        FunctionalSpec::Empirical { f } => (
            Some(empirical_limit(&ctx.model, m.p_star, m.phi_prime_at_star, *f)?),
            None,
        ),
        FunctionalSpec::Lambda { p } if p.is_none_or(|p| p == m.p_star) => (None, Some("unit-mean martingale".into())),
        FunctionalSpec::MMart { .. } => (None, Some("unit-mean martingale".into())),
        FunctionalSpec::CountT { .. } => (None, Some("checked against (eta rho)^-(1+p*) Lambda_eta(p*)".into())),
        FunctionalSpec::Sigma => (None, Some("sigma_eta / -ln eta per path".into())),
        FunctionalSpec::Lambda { .. } => (None, None),
    })
}

/// Runs every replica, aggregates in replica order and renders verdicts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let model = DislocationModel::from_spec(&cfg.model)?;
    let mal = solve_malthusian(&model)?;
    let ctx = Context { cfg, model, mal };
    let mut constants = Vec::new();
    for spec in &cfg.functionals {
        constants.push(constant_for(&ctx, spec)?);
    }

    let outcomes: Vec<Result<ReplicaData>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| run_replica(&ctx, r))
        .collect();
    let mut data = Vec::with_capacity(cfg.replicas);
    let mut quarantined = Vec::new();
    for (replica, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(d) => data.push(d),
            Err(e) => quarantined.push(Quarantined {
                replica,
                error: e.to_string(),
            }),
        }
    }
    let mut report = aggregate(&ctx, &constants, &data, quarantined)?;
    report.runtime = Some(RuntimeInfo {
        seconds: started.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    });
    Ok(report)
}

fn aggregate(
    ctx: &Context,
    constants: &[(Option<LimitConstant>, Option<String>)],
    data: &[ReplicaData],
    quarantined: Vec<Quarantined>,
) -> Result<ExperimentReport> {
    let cfg = ctx.cfg;
    let tol = &cfg.tolerances;
    let k = tol.se_multiplier;
    let lattice = is_lattice(&ctx.model);
    let conservative = ctx.model.is_conservative();
    let mut verdicts = Vec::new();
    let mut functionals = Vec::new();
    let mut trace = Vec::new();

    let q_frac = quarantined.len() as f64 / cfg.replicas as f64;
    verdicts.push(Verdict {
        criterion: "quarantine".into(),
        functional: "all".into(),
        eta: None,
        passed: q_frac <= tol.quarantine_fraction && data.len() >= 2,
        detail: format!("{} of {} replicas failed", quarantined.len(), cfg.replicas),
    });

    let mut count_index = 0;
    for (fi, spec) in cfg.functionals.iter().enumerate() {
        let label = spec.label(ctx.mal.p_star);
        let (constant, mut note) = constants[fi].clone();
        let lv = levels(spec, cfg);
        let on_eta_grid = !matches!(spec, FunctionalSpec::MMart { .. });
        let mut stats = Vec::new();
        for (li, &level) in lv.iter().enumerate() {
            let normalized: Vec<f64> = data.iter().map(|d| d.values[fi][li].1).collect();
            let mut ratios: Vec<f64> = if on_eta_grid {
                data.iter().map(|d| d.values[fi][li].1 / d.lambda_star[li]).collect()
            } else {
                normalized.clone()
            };
            for d in data {
                trace.push(TraceRow {
                    replica: d.replica,
                    eta: level,
                    functional: label.clone(),
                    value: d.values[fi][li].0,
                    normalized_value: d.values[fi][li].1,
                    lambda_mart: if on_eta_grid { d.lambda_star[li] } else { f64::NAN },
                });
            }
            let (mean, se) = batch_mean_se(&normalized, tol.batches);
            ratios.sort_by(f64::total_cmp);
            stats.push(LevelStats {
                eta: level,
                n: normalized.len(),
                mean,
                se,
                min: normalized.iter().copied().fold(f64::INFINITY, f64::min),
                max: normalized.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ratio_mean: neumaier(ratios.iter().copied()) / ratios.len().max(1) as f64,
                ratio_median: quantile(&ratios, 0.5),
                ratio_q1: quantile(&ratios, 0.25),
                ratio_q3: quantile(&ratios, 0.75),
            });
        }

        let last = stats.len() - 1;
        // Λ_η(p) is a martingale in η only at p = p*; M_t(p) is one for every p.
        let unit_mean = match spec {
            FunctionalSpec::Lambda { p } => p.is_none_or(|p| p == ctx.mal.p_star),
            FunctionalSpec::MMart { .. } => true,
            _ => false,
        };
        match spec {
            FunctionalSpec::Energy { .. } | FunctionalSpec::Empirical { .. } => {
                let c = constant.map(|c| c.value).unwrap_or(f64::NAN);
                // Quadrature error of the constant, floored at the exact tolerance.
                let slack = constant.map_or(0.0, |c| c.error_estimate).max(tol.exact_tol);
                if lattice {
                    note = Some("lattice model: constant not applicable, no SLLN verdicts".into());
                } else {
                    let s = &stats[last];
                    verdicts.push(Verdict {
                        criterion: "in_mean".into(),
                        functional: label.clone(),
                        eta: Some(s.eta),
                        passed: (s.mean - c).abs() <= k * s.se + slack,
                        detail: format!("mean {} vs constant {c}, se {}, k {k}", s.mean, s.se),
                    });
                    if stats.len() >= 2 {
                        let contracted = data
                            .iter()
                            .filter(|d| {
                                let first = (d.values[fi][0].1 / d.lambda_star[0] - c).abs();
                                let end = (d.values[fi][last].1 / d.lambda_star[last] - c).abs();
                                end < first || end <= slack
                            })
                            .count();
                        let frac = contracted as f64 / data.len().max(1) as f64;
                        verdicts.push(Verdict {
                            criterion: "pathwise_contraction".into(),
                            functional: label.clone(),
                            eta: Some(s.eta),
                            passed: frac >= tol.contraction_fraction,
                            detail: format!(
                                "{contracted} of {} paths closer to {c} at eta {} than at eta {}",
                                data.len(),
                                s.eta,
                                stats[0].eta
                            ),
                        });
                    }
                }
                if let FunctionalSpec::Empirical {
                    f: TestFunction::Const { value },
                } = spec
                {
                    let worst = data
                        .iter()
                        .flat_map(|d| {
                            d.values[fi]
                                .iter()
                                .zip(&d.lambda_star)
                                .map(|(v, l)| (v.1 - value * l).abs())
                        })
                        .fold(0.0, f64::max);
                    verdicts.push(Verdict {
                        criterion: "exact_identity".into(),
                        functional: label.clone(),
                        eta: None,
                        passed: worst <= tol.exact_tol,
                        detail: format!("max |value - {value} Lambda_eta(p*)| = {worst:e}"),
                    });
                }
            }
            FunctionalSpec::Lambda { .. } | FunctionalSpec::MMart { .. } if unit_mean => {
                for s in &stats {
                    verdicts.push(Verdict {
                        criterion: "unit_mean".into(),
                        functional: label.clone(),
                        eta: Some(s.eta),
                        passed: (s.mean - 1.0).abs() <= k * s.se || (s.mean - 1.0).abs() <= tol.exact_tol,
                        detail: format!("mean {} vs 1, se {}, k {k}", s.mean, s.se),
                    });
                }
                if conservative && matches!(spec, FunctionalSpec::Lambda { .. }) && ctx.mal.p_star == 0.0 {
                    let worst = data
                        .iter()
                        .flat_map(|d| d.values[fi].iter().map(|v| (v.1 - 1.0).abs()))
                        .fold(0.0, f64::max);
                    verdicts.push(Verdict {
                        criterion: "exact_identity".into(),
                        functional: label.clone(),
                        eta: None,
                        passed: worst <= tol.exact_tol,
                        detail: format!("max |Lambda_eta(0) - 1| = {worst:e}"),
                    });
                }
            }
            FunctionalSpec::CountT { .. } => {
                let bad = data.iter().filter(|d| !d.count_ok[count_index]).count();
                count_index += 1;
                verdicts.push(Verdict {
                    criterion: "count_bound".into(),
                    functional: label.clone(),
                    eta: None,
                    passed: bad == 0,
                    detail: format!("{bad} paths violate T <= (eta rho)^-(1+p*) Lambda_eta(p*)"),
                });
            }
            FunctionalSpec::Sigma => {
                if let Some(v) = sigma_verdict(cfg, fi, data) {
                    verdicts.push(v);
                }
            }
            FunctionalSpec::Lambda { .. } | FunctionalSpec::MMart { .. } => {}
        }

        functionals.push(FunctionalReport {
            label,
            spec: spec.clone(),
            constant,
            note,
            levels: stats,
        });
    }

    let passed = verdicts.iter().all(|v| v.passed);
    Ok(ExperimentReport {
        schema: REPORT_SCHEMA.into(),
        config: cfg.clone(),
        malthusian: ctx.mal,
        functionals,
        verdicts,
        quarantined,
        passed,
        runtime: None,
        trace,
    })
}

/// Upper tail `P(ρ_S ≥ rho)` of Spearman's coefficient for `n` untied
/// points under independence: exact enumeration up to nine points, Student t
/// approximation beyond.
pub fn spearman_upper_tail(n: usize, rho: f64) -> f64 {
    if n < 3 {
        return 1.0;
    }
    if n > 9 {
        let t = rho * ((n as f64 - 2.0) / (1.0 - rho * rho).max(1e-300)).sqrt();
        return t_upper(t, n as f64 - 2.0);
    }
    // ρ = 1 − 6 S / (n(n²−1)) with S = Σ d²; large ρ means small S.
    let denom = (n * (n * n - 1)) as f64;
    let s_obs = ((1.0 - rho) * denom / 6.0).round() as i64;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    let score = |p: &[usize]| {
        p.iter()
            .enumerate()
            .map(|(i, &v)| (i as i64 - v as i64).pow(2))
            .sum::<i64>()
    };
    let mut total = 1u64;
    let mut hits = u64::from(score(&perm) <= s_obs);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            total += 1;
            hits += u64::from(score(&perm) <= s_obs);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

/// Trend test on `σ_η / (−ln η)` against `−ln η`. Each path gets a one-sided
/// Spearman test for growth at the configured level; the verdict fails when
/// more paths reject than a binomial count at that level allows.
fn sigma_verdict(cfg: &ExperimentConfig, fi: usize, data: &[ReplicaData]) -> Option<Verdict> {
    if cfg.eta_grid.len() < 3 || data.is_empty() {
        return None;
    }
    let level = cfg.tolerances.trend_level;
    let x: Vec<f64> = cfg.eta_grid.iter().map(|e| -e.ln()).collect();
    let rhos: Vec<f64> = data
        .iter()
        .map(|d| {
            let y: Vec<f64> = d.values[fi].iter().map(|v| v.1).collect();
            spearman(&x, &y)
        })
        .collect();
    let n = x.len();
    let rejected = rhos.iter().filter(|&&r| spearman_upper_tail(n, r) <= level).count();
    let paths = rhos.len() as u64;
    let tail = match Binomial::new(level, paths) {
        Ok(b) if rejected > 0 => b.sf(rejected as u64 - 1),
        _ => 1.0,
    };
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    let sup = data
        .iter()
        .flat_map(|d| d.values[fi].iter().map(|v| v.1))
        .fold(0.0, f64::max);
    Some(Verdict {
        criterion: "sigma_no_trend".into(),
        functional: "sigma".into(),
        eta: None,
        passed: tail >= level,
        detail: format!(
            "{rejected} of {paths} paths show growth at level {level} (binomial tail {tail:.3e}); \
             mean Spearman {mean:.4}; max sigma/-ln eta = {sup:.4}"
        ),
    })
}

/// Per-ε experiment summary of a truncation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub eps: f64,
    pub master_seed: u64,
    pub report: ExperimentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEntry {
    pub functional: String,
    pub eps_pair: (f64, f64),
    pub means: (f64, f64),
    pub drift: f64,
    pub pooled_se: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub drift: Vec<DriftEntry>,
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
}

/// Reruns the experiment for each truncation level. The first level keeps
/// the configured master seed; later levels use independent seeds so that
/// the pooled standard error applies.
pub fn truncation_sweep(cfg: &ExperimentConfig, eps_list: &[f64]) -> Result<SweepReport> {
    if eps_list.is_empty() {
        return Err(FragError::Config("eps_list must not be empty".into()));
    }
    if cfg.model.family != crate::models::FamilyName::BetaBinary {
        return Err(FragError::Config(
            "truncation sweeps need the beta_binary family".into(),
        ));
    }
    let mut entries = Vec::new();
    for (i, &eps) in eps_list.iter().enumerate() {
        let mut c = cfg.clone();
        c.model.eps = Some(eps);
        if i > 0 {
            c.master_seed = split_seed(cfg.master_seed, i as u64);
        }
        let report = run_experiment(&c)?;
        entries.push(SweepEntry {
            eps,
            master_seed: c.master_seed,
            report,
        });
    }
    let mut drift = Vec::new();
    let mut verdicts: Vec<Verdict> = entries
        .iter()
        .flat_map(|e| {
            e.report.verdicts.iter().map(move |v| Verdict {
                detail: format!("eps {}: {}", e.eps, v.detail),
                ..v.clone()
            })
        })
        .collect();
    if entries.len() >= 2 {
        let a = &entries[entries.len() - 2];
        let b = &entries[entries.len() - 1];
        for (fa, fb) in a.report.functionals.iter().zip(&b.report.functionals) {
            if !matches!(
                fa.spec,
                FunctionalSpec::Energy { .. } | FunctionalSpec::Empirical { .. }
            ) {
                continue;
            }
            let sa = fa.levels.last().expect("nonempty grid");
            let sb = fb.levels.last().expect("nonempty grid");
            let d = (sa.mean - sb.mean).abs();
            let pooled = (sa.se.powi(2) + sb.se.powi(2)).sqrt();
            let stable = d < 2.0 * pooled;
            verdicts.push(Verdict {
                criterion: "truncation_drift".into(),
                functional: fa.label.clone(),
                eta: Some(sa.eta),
                passed: stable,
                detail: format!(
                    "eps {} -> {}: means {} -> {}, drift {d} vs 2 x pooled se {}",
                    a.eps,
                    b.eps,
                    sa.mean,
                    sb.mean,
                    2.0 * pooled
                ),
            });
            drift.push(DriftEntry {
                functional: fa.label.clone(),
                eps_pair: (a.eps, b.eps),
                means: (sa.mean, sb.mean),
                drift: d,
                pooled_se: pooled,
                stable,
            });
        }
    }
    let passed = verdicts.iter().all(|v| v.passed);
    Ok(SweepReport {
        entries,
        drift,
        verdicts,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaInvarianceReport {
    pub alphas: Vec<f64>,
    pub replicas: usize,
    pub identical: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_mismatch: Option<String>,
    /// Whether some first-passage time differs between indices.
    pub times_differ: bool,
}

/// Simulates every replica under each index with shared seeds and compares
/// stopped states and all size-only functionals bit for bit.
pub fn alpha_invariance_check(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<AlphaInvarianceReport> {
    if alphas.len() < 2 {
        return Err(FragError::Config("alpha invariance needs at least two indices".into()));
    }
    cfg.validate()?;
    let model = DislocationModel::from_spec(&cfg.model)?;
    let mal = solve_malthusian(&model)?;
    let size_only: Vec<FunctionalSpec> = cfg
        .functionals
        .iter()
        .filter(|f| !matches!(f, FunctionalSpec::MMart { .. } | FunctionalSpec::Sigma))
        .cloned()
        .collect();
    let results: Vec<Result<(Option<String>, bool)>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|replica| {
            let mut reference: Option<(StoppedState, Vec<u64>)> = None;
            let mut times = Vec::new();
            for &alpha in alphas {
                let c = ExperimentConfig {
                    alpha,
                    functionals: size_only.clone(),
                    ..cfg.clone()
                };
                let ctx = Context { cfg: &c, model, mal };
                let opts = SimOptions {
                    event_budget: c.event_budget,
                    ..SimOptions::stopped(alpha, c.min_eta())
                };
                let log = simulate(&model, opts, c.replica_seed(replica))?;
                let state = log.stopped_state(c.min_eta())?;
                let vals = evaluate_log(&ctx, &log, replica)?.values;
                times.push(log.first_passage_sigma(c.min_eta())?);
                let bits: Vec<u64> = vals
                    .iter()
                    .flatten()
                    .flat_map(|v| [v.0.to_bits(), v.1.to_bits()])
                    .collect();
                match &reference {
                    None => reference = Some((state, bits)),
                    Some((s0, b0)) => {
                        if s0.blocks.len() != state.blocks.len()
                            || s0
                                .blocks
                                .iter()
                                .zip(&state.blocks)
                                .any(|(a, b)| a.id != b.id || a.mass.to_bits() != b.mass.to_bits())
                        {
                            return Ok((
                                Some(format!("replica {replica}: stopped state differs at alpha = {alpha}")),
                                false,
                            ));
                        }
                        if let Some(i) = b0.iter().zip(&bits).position(|(a, b)| a != b) {
                            return Ok((
                                Some(format!(
                                    "replica {replica}: functional value {i} differs at alpha = {alpha}"
                                )),
                                false,
                            ));
                        }
                    }
                }
            }
            let differ = times.windows(2).any(|w| w[0] != w[1]);
            Ok((None, differ))
        })
        .collect();
    let mut first_mismatch = None;
    let mut times_differ = false;
    for r in results {
        let (m, d) = r?;
        times_differ |= d;
        if first_mismatch.is_none() {
            first_mismatch = m;
        }
    }
    Ok(AlphaInvarianceReport {
        alphas: alphas.to_vec(),
        replicas: cfg.replicas,
        identical: first_mismatch.is_none(),
        first_mismatch,
        times_differ,
    })
}
