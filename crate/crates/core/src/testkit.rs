//! Statistical helpers shared by the unit tests.

/// Kolmogorov tail `Q(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn p_value(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    kolmogorov_tail((s + 0.12 + 0.11 / s) * d)
}

/// One-sample Kolmogorov–Smirnov p-value against a continuous CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    p_value(d, n)
}

/// Two-sample Kolmogorov–Smirnov p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    p_value(d, (n * m) as f64 / (n + m) as f64)
}

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn ks_accepts_uniform_and_rejects_shift() {
    use rand::Rng;
    let mut rng = crate::rng::stream(1, 1, crate::rng::Purpose::Sampling);
    let u: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
    assert!(ks_one_sample(&u, |x| x.clamp(0.0, 1.0)) > 0.01);
    assert!(ks_one_sample(&u, |x| (x * x).clamp(0.0, 1.0)) < 1e-6);
    let v: Vec<f64> = (0..5000).map(|_| rng.random::<f64>() + 0.1).collect();
    assert!(ks_two_sample(&u, &v) < 1e-6);
}
