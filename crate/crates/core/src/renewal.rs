//! Renewal-equation oracle for the normalized counted process.
//!
//! With `g(t) = E[e^{−(1+p*)t} Z^φ_{e^{−t}}]`, conditioning on the population at
//! time one gives `g = f + g ∗ ϱ`. Both `ϱ` and the forcing `f` are estimated
//! from tagged fragments and the discretized equation is solved on a grid.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::tagged_fragment_path;
use crate::error::{FragError, Result};
use crate::functionals::{evaluate, Characteristic};
use crate::models::DislocationModel;
use crate::rng::{split_seed, stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenewalOptions {
    pub h: f64,
    pub t_max: f64,
    pub paths: usize,
    pub batches: usize,
    pub bootstrap: usize,
    /// Half-width of the reported interval in bootstrap standard errors.
    pub z: f64,
}

impl Default for RenewalOptions {
    fn default() -> Self {
        Self {
            h: 0.01,
            t_max: 12.0,
            paths: 100_000,
            batches: 50,
            bootstrap: 200,
            z: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalTable {
    pub h: f64,
    /// Grid points `(i + 1/2) h`.
    pub t: Vec<f64>,
    pub g: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub forcing: Vec<f64>,
    /// Binned `ϱ`, normalized to total mass one.
    pub rho: Vec<f64>,
    /// Raw estimate of the total `ϱ` mass before normalization.
    pub rho_total: f64,
    /// Tilted mean `∫ x ϱ(dx)`, an estimate of `Φ'(p*)`.
    pub tilted_mean: f64,
    pub tilted_mean_se: f64,
    pub binned_mean: f64,
    pub forcing_integral: f64,
    /// `∫ f / ∫ x ϱ(dx)`, the limit predicted by the key renewal theorem.
    pub limit: f64,
    pub lattice: bool,
    pub lattice_span: Option<f64>,
    pub lattice_fraction: f64,
    pub effective_sample_size: f64,
    pub paths: usize,
}

impl RenewalTable {
    pub fn g_final(&self) -> f64 {
        *self.g.last().unwrap_or(&0.0)
    }

    pub fn se_final(&self) -> f64 {
        *self.se.last().unwrap_or(&0.0)
    }

    /// Columns `t,g,se,lower,upper,forcing`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "g", "se", "lower", "upper", "forcing"])?;
        for i in 0..self.t.len() {
            out.write_record(
                [
                    self.t[i],
                    self.g[i],
                    self.se[i],
                    self.lower[i],
                    self.upper[i],
                    self.forcing[i],
                ]
                .map(|v| format!("{v:e}")),
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn contains_final(&self, value: f64) -> bool {
        let n = self.g.len();
        n > 0 && self.lower[n - 1] <= value && value <= self.upper[n - 1]
    }
}

struct Batch {
    rho: Vec<f64>,
    forcing: Vec<f64>,
    tilt: f64,
    weights: Vec<(f64, f64)>,
}

fn batch(
    model: &DislocationModel,
    p_star: f64,
    phi: &dyn Characteristic,
    opts: &RenewalOptions,
    seeds: std::ops::Range<u64>,
    seed: u64,
) -> Batch {
    let n = grid_len(opts);
    let mut rho = vec![0.0; n + 1];
    let mut forcing = vec![0.0; n];
    let mut tilt = 0.0;
    let mut weights = Vec::new();
    for path_index in seeds {
        let path_seed = split_seed(seed, path_index);
        let path = tagged_fragment_path(model, 0.0, 1.0, p_star, path_seed);
        for (j, step) in path.steps.iter().enumerate() {
            let m = step.parent_mass;
            let rng = stream(path_seed, j as u64 + 1, Purpose::Characteristic);
            let w = m.powf(p_star);
            // φ is one random function per dislocation, shared across the grid.
            let ln_m = m.ln();
            for (i, slot) in forcing.iter_mut().enumerate() {
                let t = (i as f64 + 0.5) * opts.h;
                if -t > ln_m {
                    continue;
                }
                let x = (-t - ln_m).exp();
                if x <= 0.0 {
                    break;
                }
                let mut r = rng.clone();
                let v = evaluate(phi, x, &step.split, &mut r);
                *slot += w * x.powf(1.0 + p_star) * v;
            }
        }
        if !path.killed {
            let m = path.final_mass();
            let x = -m.ln();
            let w = (p_star * m.ln()).exp();
            weights.push((x, w));
            tilt += w * x;
            let pos = x / opts.h;
            let lo = pos.floor();
            let frac = pos - lo;
            let lo = lo as usize;
            if lo < n {
                rho[lo] += w * (1.0 - frac);
                rho[lo + 1] += w * frac;
            }
        }
    }
    Batch {
        rho,
        forcing,
        tilt,
        weights,
    }
}

fn grid_len(opts: &RenewalOptions) -> usize {
    (opts.t_max / opts.h).round() as usize
}

/// Solves `g_i = f_i + Σ_{j≥0} ϱ_j g_{i−j}` forward in `i`.
pub fn solve_renewal(forcing: &[f64], rho: &[f64]) -> Vec<f64> {
    let n = forcing.len();
    let support: Vec<(usize, f64)> = rho
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, r)| **r != 0.0)
        .map(|(j, r)| (j, *r))
        .collect();
    let denom = 1.0 - rho.first().copied().unwrap_or(0.0);
    let mut g = vec![0.0; n];
    for i in 0..n {
        let mut acc = forcing[i];
        for &(j, r) in &support {
            if j > i {
                break;
            }
            acc += r * g[i - j];
        }
        g[i] = acc / denom;
    }
    g
}

struct Estimate {
    g: Vec<f64>,
    rho: Vec<f64>,
    forcing: Vec<f64>,
    rho_total: f64,
    tilt: f64,
}

fn estimate(batches: &[&Batch], paths: f64, n: usize) -> Estimate {
    let mut rho = vec![0.0; n + 1];
    let mut forcing = vec![0.0; n];
    let mut tilt = 0.0;
    for b in batches {
        for (a, v) in rho.iter_mut().zip(&b.rho) {
            *a += v;
        }
        for (a, v) in forcing.iter_mut().zip(&b.forcing) {
            *a += v;
        }
        tilt += b.tilt;
    }
    let rho_total: f64 = rho.iter().sum::<f64>() / paths;
    // ϱ has unit mass because Φ(p*) = 0; normalize to remove the Monte Carlo
    // fluctuation that would otherwise grow exponentially in t.
    let total: f64 = rho.iter().sum();
    for r in &mut rho {
        *r /= total;
    }
    for f in &mut forcing {
        *f /= paths;
    }
    let g = solve_renewal(&forcing, &rho[..n]);
    Estimate {
        g,
        rho,
        forcing,
        rho_total,
        tilt: tilt / paths,
    }
}

/// Lattice screen on the atoms of `ϱ`: span `d` is the mean position in the
/// heaviest nonzero bin; the model counts as lattice when more than 90% of the
/// mass sits within `h/2` of a multiple of `d`.
fn lattice_check(weights: &[(f64, f64)], h: f64) -> (bool, Option<f64>, f64) {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    if total <= 0.0 {
        return (false, None, 0.0);
    }
    let mut bins: std::collections::BTreeMap<i64, (f64, f64)> = Default::default();
    for &(x, w) in weights {
        let k = (x / h).round() as i64;
        if k != 0 {
            let e = bins.entry(k).or_default();
            e.0 += w;
            e.1 += w * x;
        }
    }
    let Some((_, &(w, wx))) = bins.iter().max_by(|a, b| a.1 .0.total_cmp(&b.1 .0)) else {
        return (false, None, 1.0);
    };
    let d = wx / w;
    if d <= 5.0 * h {
        return (false, Some(d), 0.0);
    }
    let on: f64 = weights
        .iter()
        .filter(|(x, _)| (x - (x / d).round() * d).abs() < h / 2.0)
        .map(|w| w.1)
        .sum();
    let fraction = on / total;
    (fraction > 0.9, Some(d), fraction)
}

pub fn renewal_oracle(
    model: &DislocationModel,
    p_star: f64,
    phi: &dyn Characteristic,
    opts: RenewalOptions,
    seed: u64,
) -> Result<RenewalTable> {
    if !(opts.h > 0.0 && opts.t_max > opts.h) {
        return Err(FragError::InvalidParameter("renewal grid needs 0 < h < t_max".into()));
    }
    if opts.batches < 2 || opts.paths < opts.batches || opts.bootstrap < 2 {
        return Err(FragError::InvalidParameter(
            "renewal oracle needs at least two batches, one path per batch and two resamples".into(),
        ));
    }
    let n = grid_len(&opts);
    let per = opts.paths / opts.batches;
    let paths = per * opts.batches;
    let batches: Vec<Batch> = (0..opts.batches)
        .into_par_iter()
        .map(|b| {
            let lo = (b * per) as u64;
            batch(model, p_star, phi, &opts, lo..lo + per as u64, seed)
        })
        .collect();

    let all: Vec<&Batch> = batches.iter().collect();
    let point = estimate(&all, paths as f64, n);

    let mut rng = stream(seed, 0, Purpose::Bootstrap);
    let resamples: Vec<Vec<usize>> = (0..opts.bootstrap)
        .map(|_| (0..opts.batches).map(|_| rng.random_range(0..opts.batches)).collect())
        .collect();
    let boots: Vec<Vec<f64>> = resamples
        .par_iter()
        .map(|idx| {
            let pick: Vec<&Batch> = idx.iter().map(|&i| &batches[i]).collect();
            estimate(&pick, paths as f64, n).g
        })
        .collect();
    let se: Vec<f64> = (0..n)
        .map(|i| {
            let mean = boots.iter().map(|b| b[i]).sum::<f64>() / boots.len() as f64;
            let var = boots.iter().map(|b| (b[i] - mean).powi(2)).sum::<f64>() / (boots.len() - 1) as f64;
            var.sqrt()
        })
        .collect();

    let batch_tilts: Vec<f64> = batches.iter().map(|b| b.tilt / per as f64).collect();
    let bm = batch_tilts.iter().sum::<f64>() / batch_tilts.len() as f64;
    let bvar = batch_tilts.iter().map(|t| (t - bm).powi(2)).sum::<f64>() / (batch_tilts.len() - 1) as f64;
    let tilted_mean_se = (bvar / batch_tilts.len() as f64).sqrt();

    let tilted_mean = point.tilt / point.rho_total;
    let binned_mean: f64 = point.rho.iter().enumerate().map(|(j, r)| j as f64 * opts.h * r).sum();
    let forcing_integral: f64 = point.forcing.iter().sum::<f64>() * opts.h;

    let weights: Vec<(f64, f64)> = batches.iter().flat_map(|b| b.weights.iter().copied()).collect();
    let (lattice, lattice_span, lattice_fraction) = lattice_check(&weights, opts.h);
    let sw: f64 = weights.iter().map(|w| w.1).sum();
    let sw2: f64 = weights.iter().map(|w| w.1 * w.1).sum();
    let effective_sample_size = if sw2 > 0.0 { sw * sw / sw2 } else { 0.0 };

    let g = point.g;
    let lower = g.iter().zip(&se).map(|(g, s)| g - opts.z * s).collect();
    let upper = g.iter().zip(&se).map(|(g, s)| g + opts.z * s).collect();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(FragError::NonFinite("renewal solution".into()));
    }
    Ok(RenewalTable {
        h: opts.h,
        t: (0..n).map(|i| (i as f64 + 0.5) * opts.h).collect(),
        g,
        se,
        lower,
        upper,
        forcing: point.forcing,
        rho: point.rho,
        rho_total: point.rho_total,
        tilted_mean,
        tilted_mean_se: tilted_mean_se / point.rho_total,
        binned_mean,
        forcing_integral,
        limit: forcing_integral / binned_mean,
        lattice,
        lattice_span,
        lattice_fraction,
        effective_sample_size,
        paths,
    })
}
