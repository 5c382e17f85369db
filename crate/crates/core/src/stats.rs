//! Estimators with 3-sigma intervals and the distributional tests used by the
//! verification suite.
//!
//! All distributional tests run at significance 0.001:
//! - one-sample KS: reject when `D >= 1.949 / sqrt(n)` (Kolmogorov tail
//!   `Q(1.949) ~ 0.001`);
//! - two-sample KS: reject when `D >= 1.949 * sqrt((n + m) / (n m))`;
//! - chi-square: reject when the statistic reaches the 0.999 quantile of
//!   chi-square with `bins - 1` (or the supplied) degrees of freedom;
//! - characteristic functions: reject when any grid point deviates by three
//!   standard errors or more.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::randkit::Provenance;

/// Kolmogorov critical value at p = 0.001.
pub const KS_CRITICAL: f64 = 1.949;
pub const SIGNIFICANCE: f64 = 0.001;
/// Width of reported intervals, in standard errors.
pub const CI_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimate: f64,
    pub n: usize,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub diagnostics: BTreeMap<String, f64>,
}

impl EstimateReport {
    pub fn new(estimate: f64, std_error: f64, n: usize) -> Self {
        let std_error = std_error.max(0.0);
        Self {
            estimate,
            n,
            std_error,
            ci_low: estimate - CI_SIGMAS * std_error,
            ci_high: estimate + CI_SIGMAS * std_error,
            provenance: None,
            diagnostics: BTreeMap::new(),
        }
    }

    /// Exact value, no Monte-Carlo error.
    pub fn exact(value: f64) -> Self {
        Self::new(value, 0.0, 0)
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = Some(p);
        self
    }

    pub fn with_diagnostic(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = Self::new(self.estimate * c, self.std_error * c.abs(), self.n);
        out.provenance = self.provenance.clone();
        out.diagnostics = self.diagnostics.clone();
        out
    }

    /// `|estimate - target| <= k * std_error`.
    pub fn within_sigmas(&self, target: f64, k: f64) -> bool {
        (self.estimate - target).abs() <= k * self.std_error
    }

    /// Two independent estimates agree within combined `k` sigma.
    pub fn agrees_with(&self, other: &EstimateReport, k: f64) -> bool {
        let se = self.std_error.hypot(other.std_error);
        (self.estimate - other.estimate).abs() <= k * se
    }

    /// Standardised distance to another estimate.
    pub fn z_score_against(&self, other: &EstimateReport) -> f64 {
        let se = self.std_error.hypot(other.std_error);
        if se == 0.0 {
            if self.estimate == other.estimate {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.estimate - other.estimate).abs() / se
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub statistic: f64,
    pub threshold: f64,
    pub p_proxy: f64,
    pub pass: bool,
    pub n: usize,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub details: BTreeMap<String, f64>,
}

impl StatTestResult {
    fn new(statistic: f64, threshold: f64, p_proxy: f64, n: usize) -> Self {
        Self {
            statistic,
            threshold,
            p_proxy,
            pass: statistic < threshold,
            n,
            details: BTreeMap::new(),
        }
    }
}

/// Sample mean with standard error `s / sqrt(n)`.
pub fn mean_ci(samples: &[f64]) -> Result<EstimateReport> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::InvalidSamples("empty sample".into()));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidSamples("non-finite value".into()));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(EstimateReport::new(mean, se, n))
}

/// Self-normalised weighted mean `sum w v / sum w` with delta-method error.
pub fn weighted_mean_ci(values: &[f64], weights: &[f64]) -> Result<EstimateReport> {
    if values.len() != weights.len() || values.is_empty() {
        return Err(Error::InvalidSamples("values and weights must match and be non-empty".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidSamples("weights must be nonnegative with positive mass".into()));
    }
    let est = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values
        .iter()
        .zip(weights)
        .map(|(v, w)| (w * (v - est)).powi(2))
        .sum::<f64>()
        / (total * total);
    let ess = total * total / weights.iter().map(|w| w * w).sum::<f64>();
    Ok(EstimateReport::new(est, var.sqrt(), values.len()).with_diagnostic("effective_sample_size", ess))
}

/// Rejects NaN and returns the samples sorted ascending.
pub fn sorted_samples(mut samples: Vec<f64>) -> Result<Vec<f64>> {
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidSamples("NaN in sample".into()));
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples)
}

fn check_sorted(samples: &[f64]) -> Result<()> {
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidSamples("NaN in sample".into()));
    }
    if samples.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidSamples("samples must be sorted ascending".into()));
    }
    Ok(())
}

/// Asymptotic Kolmogorov tail `P(sqrt(n) D > lambda)`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test. Samples must be sorted.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<StatTestResult> {
    let n = samples.len();
    if n < 1000 {
        return Err(Error::InvalidSamples(format!("KS needs at least 1000 samples, got {n}")));
    }
    check_sorted(samples)?;
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / nf).max((i + 1) as f64 / nf - f);
    }
    let threshold = KS_CRITICAL / nf.sqrt();
    Ok(StatTestResult::new(d, threshold, kolmogorov_tail(d * nf.sqrt()), n))
}

/// Two-sample Kolmogorov-Smirnov test. Both samples must be sorted.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<StatTestResult> {
    let (n, m) = (a.len(), b.len());
    if n < 1000 || m < 1000 {
        return Err(Error::InvalidSamples(format!(
            "two-sample KS needs at least 1000 samples each, got {n} and {m}"
        )));
    }
    check_sorted(a)?;
    check_sorted(b)?;
    let (nf, mf) = (n as f64, m as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / nf - j as f64 / mf).abs());
    }
    let scale = ((nf + mf) / (nf * mf)).sqrt();
    Ok(StatTestResult::new(d, KS_CRITICAL * scale, kolmogorov_tail(d / scale), n + m))
}

fn chi_square_threshold(dof: usize) -> (ChiSquared, f64) {
    let dist = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    let t = dist.inverse_cdf(1.0 - SIGNIFICANCE);
    (dist, t)
}

/// Chi-square goodness of fit of samples on [0, 1) against the uniform law.
pub fn chi_square_uniform(samples: &[f64], bins: usize) -> Result<StatTestResult> {
    if bins < 2 {
        return Err(Error::InvalidSamples("need at least two bins".into()));
    }
    if samples.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidSamples("uniform test expects samples in [0, 1]".into()));
    }
    let mut counts = vec![0.0; bins];
    for &x in samples {
        let k = ((x * bins as f64) as usize).min(bins - 1);
        counts[k] += 1.0;
    }
    let expected = vec![samples.len() as f64 / bins as f64; bins];
    chi_square_counts(&counts, &expected, bins - 1)
}

/// Pearson chi-square of observed against expected counts.
pub fn chi_square_counts(observed: &[f64], expected: &[f64], dof: usize) -> Result<StatTestResult> {
    if observed.len() != expected.len() || observed.is_empty() || dof == 0 {
        return Err(Error::InvalidSamples("count vectors must match and dof be positive".into()));
    }
    if expected.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidSamples("expected counts must be positive".into()));
    }
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum();
    let (dist, threshold) = chi_square_threshold(dof);
    let n = observed.iter().sum::<f64>() as usize;
    let mut out = StatTestResult::new(stat, threshold, 1.0 - dist.cdf(stat), n);
    out.details.insert("dof".into(), dof as f64);
    Ok(out)
}

/// Empirical characteristic function against a real (symmetric) target.
///
/// At each grid point the real part is compared with the target and the
/// imaginary part with zero, each in units of its own standard error. The
/// statistic is the largest such z-score; the test passes below 3.
pub fn cf_distance(
    samples: &[Vec<f64>],
    target_cf: impl Fn(&[f64]) -> f64,
    u_grid: &[Vec<f64>],
) -> Result<StatTestResult> {
    if u_grid.is_empty() {
        return Err(Error::InvalidSamples("empty frequency grid".into()));
    }
    let n = samples.len();
    if n < 10_000 {
        return Err(Error::InvalidSamples(format!("CF test needs at least 10^4 samples, got {n}")));
    }
    let nf = n as f64;
    let mut worst_z = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut details = BTreeMap::new();
    for (k, u) in u_grid.iter().enumerate() {
        if samples.iter().any(|x| x.len() != u.len()) {
            return Err(Error::InvalidSamples("dimension mismatch between samples and grid".into()));
        }
        let (mut sc, mut ss, mut sc2, mut ss2) = (0.0, 0.0, 0.0, 0.0);
        for x in samples {
            let phase: f64 = x.iter().zip(u).map(|(a, b)| a * b).sum();
            let (s, c) = phase.sin_cos();
            sc += c;
            ss += s;
            sc2 += c * c;
            ss2 += s * s;
        }
        let (mc, ms) = (sc / nf, ss / nf);
        let se_c = ((sc2 / nf - mc * mc).max(0.0) / nf).sqrt().max(1e-300);
        let se_s = ((ss2 / nf - ms * ms).max(0.0) / nf).sqrt().max(1e-300);
        let target = target_cf(u);
        let z = ((mc - target).abs() / se_c).max(ms.abs() / se_s);
        worst_z = worst_z.max(z);
        worst_abs = worst_abs.max((mc - target).abs().hypot(ms));
        details.insert(format!("u{k}_empirical_re"), mc);
        details.insert(format!("u{k}_target"), target);
        details.insert(format!("u{k}_se"), se_c);
    }
    let p = statrs::function::erf::erfc(worst_z / std::f64::consts::SQRT_2);
    let mut out = StatTestResult::new(worst_z, CI_SIGMAS, p, n);
    details.insert("max_abs_deviation".into(), worst_abs);
    out.details = details;
    Ok(out)
}

/// Pearson correlation coefficient with its large-sample standard error
/// `1 / sqrt(n)` under independence.
pub fn correlation(x: &[f64], y: &[f64]) -> Result<EstimateReport> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InvalidSamples("need matching samples of length >= 3".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    Ok(EstimateReport::new(sxy / (sxx * syy).sqrt(), 1.0 / n.sqrt(), x.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randkit::{sample_gaussian, RngState};
    use statrs::function::erf::erf;

    fn normal_cdf(x: f64) -> f64 {
        0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
    }

    #[test]
    fn ks_calibration() {
        let mut fails = 0;
        for rep in 0..200 {
            let mut rng = RngState::new(77, rep);
            let xs = sorted_samples((0..2000).map(|_| sample_gaussian(&mut rng)).collect()).unwrap();
            if !ks_test(&xs, normal_cdf).unwrap().pass {
                fails += 1;
            }
        }
        // 0.1% nominal rate: more than 3 failures in 200 would be suspicious.
        assert!(fails <= 3, "{fails} failures");
    }

    #[test]
    fn ks_power_against_cauchy() {
        let mut rng = RngState::new(8, 0);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| sample_gaussian(&mut rng) / sample_gaussian(&mut rng))
            .collect();
        let xs = sorted_samples(xs).unwrap();
        assert!(!ks_test(&xs, normal_cdf).unwrap().pass);
    }

    #[test]
    fn ks_rejects_bad_input() {
        assert!(ks_test(&[0.0; 10], normal_cdf).is_err());
        let mut xs: Vec<f64> = (0..2000).map(|i| i as f64).collect();
        xs.swap(0, 1);
        assert!(ks_test(&xs, normal_cdf).is_err());
        xs.swap(0, 1);
        xs[5] = f64::NAN;
        assert!(ks_test(&xs, normal_cdf).is_err());
        assert!(sorted_samples(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn two_sample_ks() {
        let mut rng = RngState::new(9, 0);
        let a = sorted_samples((0..20_000).map(|_| sample_gaussian(&mut rng)).collect()).unwrap();
        let b = sorted_samples((0..20_000).map(|_| sample_gaussian(&mut rng)).collect()).unwrap();
        let c = sorted_samples((0..20_000).map(|_| 1.1 * sample_gaussian(&mut rng)).collect()).unwrap();
        assert!(ks_two_sample(&a, &b).unwrap().pass);
        assert!(!ks_two_sample(&a, &c).unwrap().pass);
    }

    #[test]
    fn chi_square_uniform_and_power() {
        let mut rng = RngState::new(10, 0);
        let u: Vec<f64> = (0..100_000).map(|_| rng.uniform()).collect();
        assert!(chi_square_uniform(&u, 50).unwrap().pass);
        let tri: Vec<f64> = (0..100_000)
            .map(|_| 0.5 * (rng.uniform() + rng.uniform()))
            .collect();
        assert!(!chi_square_uniform(&tri, 50).unwrap().pass);
    }

    #[test]
    fn constant_mean() {
        let r = mean_ci(&[2.5; 100]).unwrap();
        assert_eq!(r.estimate, 2.5);
        assert_eq!(r.std_error, 0.0);
        assert!(r.ci_low <= r.estimate && r.estimate <= r.ci_high);
    }

    #[test]
    fn cf_gaussian_and_power() {
        let mut rng = RngState::new(11, 0);
        let xs: Vec<Vec<f64>> = (0..50_000).map(|_| vec![sample_gaussian(&mut rng)]).collect();
        let grid = vec![vec![0.5], vec![1.0], vec![2.0]];
        let ok = cf_distance(&xs, |u| (-0.5 * u[0] * u[0]).exp(), &grid).unwrap();
        assert!(ok.pass, "{ok:?}");
        let bad = cf_distance(&xs, |u| (-0.6 * u[0] * u[0]).exp(), &[vec![1.0]]).unwrap();
        assert!(!bad.pass);
        assert!(cf_distance(&xs, |_| 1.0, &[]).is_err());
    }

    #[test]
    fn weighted_mean_basics() {
        let r = weighted_mean_ci(&[1.0, 3.0], &[1.0, 1.0]).unwrap();
        assert!((r.estimate - 2.0).abs() < 1e-15);
        assert!(weighted_mean_ci(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn kolmogorov_tail_at_critical_value() {
        assert!((kolmogorov_tail(KS_CRITICAL) - 0.001).abs() < 5e-5);
    }
}
