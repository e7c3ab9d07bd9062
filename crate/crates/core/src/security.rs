//! Goodness-of-fit checks on the sender-side distributions.
//!
//! Only embedding outputs are examined here; nothing on the receiver side
//! (encoder, refinement) feeds into these tests.

use serde::{Deserialize, Serialize};

use crate::codec::{normal_cdf, UniformVector};
use crate::error::{Result, StegoError};

/// Significance level used by every test in this module.
pub const SIGNIFICANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodnessReport {
    pub test: String,
    pub n: usize,
    pub statistic: f64,
    pub p_value: Option<f64>,
    pub pass: bool,
}

/// Survival function of the Kolmogorov distribution,
/// `Q(t) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 t^2)`.
pub fn kolmogorov_survival(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if t < 0.2 {
        // The alternating series converges slowly here and the value is 1 to
        // double precision.
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * t * t).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sided one-sample KS statistic `sup |F_n - F|` for a continuous `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        let above = (i + 1) as f64 / n - f;
        let below = f - i as f64 / n;
        d.max(above).max(below)
    })
}

/// Asymptotic p-value with Stephens' small-sample correction
/// `t = (sqrt(n) + 0.12 + 0.11 / sqrt(n)) D`.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d)
}

fn ks_report(name: &str, sample: &[f64], cdf: impl Fn(f64) -> f64) -> GoodnessReport {
    let d = ks_statistic(sample, cdf);
    let p = ks_p_value(d, sample.len());
    GoodnessReport {
        test: name.to_string(),
        n: sample.len(),
        statistic: d,
        p_value: Some(p),
        pass: p > SIGNIFICANCE,
    }
}

/// One-sample KS test of latent coordinates against `N(0, 1)`.
pub fn ks_test_gaussian(sample: &[f64]) -> Result<GoodnessReport> {
    if sample.len() < 100 {
        return Err(StegoError::invalid(format!(
            "KS test needs at least 100 samples, got {}",
            sample.len()
        )));
    }
    if sample.iter().any(|v| v.is_nan()) {
        return Err(StegoError::invalid("sample contains NaN"));
    }
    Ok(ks_report("ks_gaussian", sample, normal_cdf))
}

/// Histogram KL divergence `sum p_j ln(p_j / q_j)` in nats between the
/// sample and `N(0, 1)`, using `bins` equiprobable Gaussian bins (so
/// `q_j = 1 / bins`). Empty bins receive a count of one.
pub fn empirical_kl(sample: &[f64], bins: usize) -> Result<f64> {
    if bins < 8 {
        return Err(StegoError::invalid("need at least 8 bins"));
    }
    if sample.len() < 100 * bins {
        return Err(StegoError::invalid(format!(
            "{} samples is too few for {bins} bins",
            sample.len()
        )));
    }
    let mut counts = vec![0usize; bins];
    for &x in sample {
        let u = normal_cdf(x);
        let j = ((u * bins as f64) as usize).min(bins - 1);
        counts[j] += 1;
    }
    let smoothed: Vec<f64> = counts.iter().map(|&c| if c == 0 { 1.0 } else { c as f64 }).collect();
    let total: f64 = smoothed.iter().sum();
    let q = 1.0 / bins as f64;
    Ok(smoothed
        .iter()
        .map(|&c| {
            let p = c / total;
            p * (p / q).ln()
        })
        .sum())
}

/// KS test of stratified uniforms against `Uniform(0, 1)`, combined with a
/// balance check: the fraction of values in `[0.5, 1)` must lie within three
/// standard errors of `ones_rate`, the message's fraction of one bits.
pub fn uniformity_test(s: &UniformVector, ones_rate: f64) -> Result<GoodnessReport> {
    if s.len() < 1000 {
        return Err(StegoError::invalid(format!(
            "uniformity test needs at least 1000 samples, got {}",
            s.len()
        )));
    }
    if !(0.0..=1.0).contains(&ones_rate) {
        return Err(StegoError::invalid("ones rate must lie in [0, 1]"));
    }
    let mut report = ks_report("ks_uniform", s.values(), |x| x.clamp(0.0, 1.0));
    report.pass = report.pass && half_interval_balance(s, ones_rate);
    Ok(report)
}

/// Whether the fraction of values in `[0.5, 1)` is within three binomial
/// standard errors of `ones_rate`.
pub fn half_interval_balance(s: &UniformVector, ones_rate: f64) -> bool {
    let n = s.len() as f64;
    let upper = s.values().iter().filter(|&&v| v >= 0.5).count() as f64 / n;
    let sigma = (ones_rate * (1.0 - ones_rate) / n).sqrt();
    (upper - ones_rate).abs() <= 3.0 * sigma
}
