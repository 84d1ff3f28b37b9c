//! Small statistical utilities used by the Monte Carlo validation layer:
//! Kolmogorov-Smirnov distances, empirical quantiles, an Anderson-Darling
//! normality statistic, and binomial standard errors.

use statrs::distribution::ContinuousCDF;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    statrs::distribution::Normal::standard().cdf(z)
}

/// Two-sample Kolmogorov-Smirnov distance `sup |F_a - F_b|` via a sorted
/// merge; ties are resolved by advancing both empirical CDFs past the tied
/// value before comparing.
pub fn two_sample_ks(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "KS needs nonempty samples");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// One-sample Kolmogorov-Smirnov distance against a reference CDF.
pub fn one_sample_ks(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    assert!(!sample.is_empty(), "KS needs a nonempty sample");
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Linear-interpolation empirical quantile of a sample (need not be sorted).
pub fn empirical_quantile(sample: &[f64], p: f64) -> f64 {
    assert!(!sample.is_empty(), "quantile of an empty sample");
    assert!((0.0..=1.0).contains(&p), "p must lie in [0, 1], got {p}");
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

/// Same, assuming the slice is already sorted ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Anderson-Darling statistic of a sample against the standard normal law
/// (fully specified null, no estimated parameters).
pub fn anderson_darling_normal(sample: &[f64]) -> f64 {
    let n = sample.len();
    assert!(n >= 2, "Anderson-Darling needs at least 2 points");
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let u = normal_cdf(s[i]).clamp(1e-300, 1.0 - 1e-16);
        let v = normal_cdf(s[n - 1 - i]).clamp(1e-300, 1.0 - 1e-16);
        acc += (2.0 * i as f64 + 1.0) * (u.ln() + (1.0 - v).ln());
    }
    -nf - acc / nf
}

/// 1% critical value of the fully-specified Anderson-Darling statistic;
/// samples from the hypothesized law exceed it with probability 0.01.
pub const AD_CRITICAL_1PCT: f64 = 3.857;

/// Standard error of a binomial proportion estimate from `m` trials.
pub fn binomial_se(p_hat: f64, m: usize) -> f64 {
    assert!(m > 0);
    (p_hat * (1.0 - p_hat) / m as f64).sqrt()
}

/// Sample mean and unbiased sample variance.
pub fn mean_var(sample: &[f64]) -> (f64, f64) {
    let n = sample.len();
    assert!(n >= 2, "variance needs at least 2 points");
    let mean = sample.iter().sum::<f64>() / n as f64;
    let var = sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var)
}

/// Sample median.
pub fn median(sample: &[f64]) -> f64 {
    assert!(!sample.is_empty(), "median of an empty sample");
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
