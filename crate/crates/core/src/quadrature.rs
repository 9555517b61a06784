//! Adaptive Gauss–Kronrod (7/15) quadrature with global subdivision.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{FragError, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Tolerances and limits for [`integrate`].
#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-12,
            max_intervals: 4000,
        }
    }
}

impl QuadOptions {
    pub fn with_abs(abs_tol: f64) -> Self {
        Self {
            abs_tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut res_k = fc * WGK[7];
    let mut res_g = fc * WG[3];
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 7];
    let mut fv2 = [0.0; 7];
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = res_k * 0.5;
    let mut res_asc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * half;
    let res_abs = res_abs * half.abs();
    let res_asc = res_asc * half.abs();
    let mut err = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && err != 0.0 {
        err = res_asc * (200.0 * err / res_asc).powf(1.5).min(1.0);
    }
    let floor = 50.0 * f64::EPSILON * res_abs;
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(floor);
    }
    (value, err)
}

/// Integrates `f` over `[a, b]`.
///
/// Subdivides the segment with the largest error estimate until the summed
/// error meets `max(abs_tol, rel_tol·|I|)`. Non-finite integrand values or an
/// exhausted interval budget are reported as errors.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> Result<QuadResult> {
    if a == b {
        return Ok(QuadResult {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
        });
    }
    let mut evaluations = 15;
    let (v, e) = kronrod15(&mut f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Segment {
        a,
        b,
        value: v,
        error: e,
    });
    let mut total = v;
    let mut total_err = e;
    loop {
        if !total.is_finite() || !total_err.is_finite() {
            return Err(FragError::NonFinite(format!(
                "integrand produced a non-finite value on [{a}, {b}]"
            )));
        }
        let tol = opts.abs_tol.max(opts.rel_tol * total.abs());
        if total_err <= tol {
            // Re-sum in a fixed order so the result does not depend on heap layout.
            let mut segs: Vec<Segment> = heap.into_vec();
            segs.sort_by(|x, y| x.a.total_cmp(&y.a));
            let value = segs.iter().map(|s| s.value).sum();
            return Ok(QuadResult {
                value,
                error: total_err,
                evaluations,
            });
        }
        if heap.len() >= opts.max_intervals {
            return Err(FragError::QuadratureFailure {
                value: total,
                error: total_err,
                tolerance: tol,
            });
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(FragError::QuadratureFailure {
                value: total,
                error: total_err,
                tolerance: tol,
            });
        }
        let (v1, e1) = kronrod15(&mut f, worst.a, mid);
        let (v2, e2) = kronrod15(&mut f, mid, worst.b);
        evaluations += 30;
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.error;
        heap.push(Segment {
            a: worst.a,
            b: mid,
            value: v1,
            error: e1,
        });
        heap.push(Segment {
            a: mid,
            b: worst.b,
            value: v2,
            error: e2,
        });
    }
}

/// Integrates over `[a, b]` split at the given interior points.
pub fn integrate_pieces<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    opts: QuadOptions,
) -> Result<QuadResult> {
    let mut points: Vec<f64> = breaks.iter().copied().filter(|x| *x > a && *x < b).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut nodes = Vec::with_capacity(points.len() + 2);
    nodes.push(a);
    nodes.extend(points);
    nodes.push(b);
    let share = QuadOptions {
        abs_tol: opts.abs_tol / (nodes.len() - 1) as f64,
        ..opts
    };
    let mut out = QuadResult {
        value: 0.0,
        error: 0.0,
        evaluations: 0,
    };
    for w in nodes.windows(2) {
        let r = integrate(&mut f, w[0], w[1], share)?;
        out.value += r.value;
        out.error += r.error;
        out.evaluations += r.evaluations;
    }
    Ok(out)
}

/// Integrates over `[a, ∞)` through the map `x = a + (1 − t)/t`, `t ∈ (0, 1]`.
pub fn integrate_to_infinity<F: FnMut(f64) -> f64>(mut f: F, a: f64, opts: QuadOptions) -> Result<QuadResult> {
    integrate(
        |t| {
            if t <= 0.0 {
                return 0.0;
            }
            let x = a + (1.0 - t) / t;
            let v = f(x);
            if v == 0.0 {
                0.0
            } else {
                v / (t * t)
            }
        },
        0.0,
        1.0,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let r = integrate(|x| 3.0 * x * x, 0.0, 2.0, QuadOptions::default()).unwrap();
        assert!((r.value - 8.0).abs() < 1e-13);
    }

    #[test]
    fn algebraic_singularity_converges() {
        let r = integrate(|x| x.powf(-0.5), 0.0, 1.0, QuadOptions::with_abs(1e-9)).unwrap();
        assert!((r.value - 2.0).abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn jump_is_resolved() {
        let r = integrate(
            |x| if x < 0.3 { 1.0 } else { 0.0 },
            0.0,
            1.0,
            QuadOptions::with_abs(1e-11),
        )
        .unwrap();
        assert!((r.value - 0.3).abs() < 1e-10, "{r:?}");
        let p = integrate_pieces(
            |x| if x < 0.3 { 1.0 } else { 0.0 },
            0.0,
            1.0,
            &[0.3],
            QuadOptions::default(),
        )
        .unwrap();
        assert!((p.value - 0.3).abs() < 1e-14);
    }

    #[test]
    fn semi_infinite_exponential() {
        let r = integrate_to_infinity(|x| (-0.5 * x).exp(), 0.0, QuadOptions::default()).unwrap();
        assert!((r.value - 2.0).abs() < 1e-11, "{r:?}");
    }

    #[test]
    fn non_finite_integrand_errors() {
        let r = integrate(|_| f64::NAN, 0.0, 1.0, QuadOptions::default());
        assert!(matches!(r, Err(FragError::NonFinite(_))));
    }

    #[test]
    fn interval_budget_errors() {
        let opts = QuadOptions {
            abs_tol: 1e-15,
            rel_tol: 0.0,
            max_intervals: 3,
        };
        let r = integrate(|x| (1.0 / x).sin(), 1e-4, 1.0, opts);
        assert!(matches!(r, Err(FragError::QuadratureFailure { .. })));
    }
}
