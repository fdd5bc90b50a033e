//! Effect sizes, percentile bootstrap intervals and Welch's t-test.
//!
//! The bootstrap follows the plain percentile procedure: resample with
//! replacement, recompute the statistic, and read off the `(1-c)/2` and
//! `1-(1-c)/2` quantiles. No bias correction or acceleration is applied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::compensated_sum;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("no data supplied")]
    EmptyData,
    #[error("sample {which} has {have} values; need at least {need}")]
    InsufficientSamples {
        which: &'static str,
        have: usize,
        need: usize,
    },
    #[error("proportion data must be 0 or 1, found {0}")]
    NotABinaryOutcome(f64),
    #[error("invalid bootstrap configuration: {0}")]
    InvalidConfig(String),
}

/// Sample mean, sample standard deviation (n-1 denominator) and count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = compensated_sum(xs.iter().copied()) / n as f64;
        let sd = if n > 1 {
            (compensated_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

/// Pooled standard deviation of two groups.
pub fn pooled_sd(a: Moments, b: Moments) -> f64 {
    let num = (a.n as f64 - 1.0) * a.sd * a.sd + (b.n as f64 - 1.0) * b.sd * b.sd;
    (num / (a.n as f64 + b.n as f64 - 2.0)).sqrt()
}

/// Cohen's d of `incorrect` relative to `correct`: `(mu_i - mu_c) / sd_pooled`.
///
/// Returns `None` when the pooled SD is zero and the means differ.
pub fn cohens_d(correct: Moments, incorrect: Moments) -> Option<f64> {
    let sp = pooled_sd(correct, incorrect);
    let diff = incorrect.mean - correct.mean;
    if sp > 0.0 {
        Some(diff / sp)
    } else if diff == 0.0 {
        Some(0.0)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectBand {
    Negligible,
    Small,
    Medium,
    Large,
}

impl std::fmt::Display for EffectBand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EffectBand::Negligible => "negligible",
            EffectBand::Small => "small",
            EffectBand::Medium => "medium",
            EffectBand::Large => "large",
        })
    }
}

/// Conventional interpretation band for `|d|`; lower bounds are inclusive.
pub fn effect_band(d: f64) -> EffectBand {
    let d = d.abs();
    if d < 0.2 {
        EffectBand::Negligible
    } else if d < 0.5 {
        EffectBand::Small
    } else if d < 0.8 {
        EffectBand::Medium
    } else {
        EffectBand::Large
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Significance {
    #[serde(rename = "ns")]
    NotSignificant,
    #[serde(rename = "*")]
    P05,
    #[serde(rename = "**")]
    P01,
    #[serde(rename = "***")]
    P001,
}

impl Significance {
    pub fn from_p(p: f64) -> Self {
        if p < 0.001 {
            Significance::P001
        } else if p < 0.01 {
            Significance::P01
        } else if p < 0.05 {
            Significance::P05
        } else {
            Significance::NotSignificant
        }
    }
}

impl std::fmt::Display for Significance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Significance::NotSignificant => "ns",
            Significance::P05 => "*",
            Significance::P01 => "**",
            Significance::P001 => "***",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub t_stat: f64,
    /// Welch-Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
    pub significance: Significance,
}

/// Welch's unequal-variance two-sample t-test, `t = (mean_a - mean_b) / sqrt(s_a²/n_a + s_b²/n_b)`.
pub fn independent_t_test(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    for (which, xs) in [("a", a), ("b", b)] {
        if xs.len() < 2 {
            return Err(StatsError::InsufficientSamples {
                which,
                have: xs.len(),
                need: 2,
            });
        }
    }
    let (ma, mb) = (Moments::of(a).unwrap(), Moments::of(b).unwrap());
    Ok(welch_from_moments(ma, mb))
}

pub fn welch_from_moments(a: Moments, b: Moments) -> TestResult {
    let va = a.sd * a.sd / a.n as f64;
    let vb = b.sd * b.sd / b.n as f64;
    let se = (va + vb).sqrt();
    let diff = a.mean - b.mean;
    let (t_stat, df, p_value) = if se == 0.0 {
        let df = (a.n + b.n) as f64 - 2.0;
        if diff == 0.0 {
            (0.0, df, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, df, 0.0)
        }
    } else {
        let t = diff / se;
        let df = (va + vb).powi(2)
            / (va * va / (a.n as f64 - 1.0) + vb * vb / (b.n as f64 - 1.0));
        (t, df, student_t_two_sided_p(t, df))
    };
    TestResult {
        t_stat,
        df,
        p_value,
        significance: Significance::from_p(p_value),
    }
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() || df.is_nan() || df <= 0.0 {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(0.5 * df, 0.5, x).clamp(0.0, 1.0)
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The continued fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    /// Mean of 0/1 outcomes.
    Proportion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    /// Fewest iterations accepted when an interval is reported.
    pub const MIN_REPORTING_ITERATIONS: usize = 100;

    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<(), StatsError> {
        if self.iterations == 0 {
            return Err(StatsError::InvalidConfig("iterations must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(StatsError::InvalidConfig(format!(
                "confidence {} outside (0, 1)",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Percentile bootstrap interval for the mean or a proportion.
pub fn bootstrap_ci(
    data: &[f64],
    statistic: Statistic,
    cfg: &BootstrapConfig,
) -> Result<(f64, f64), StatsError> {
    if statistic == Statistic::Proportion {
        if let Some(&bad) = data.iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(StatsError::NotABinaryOutcome(bad));
        }
    }
    bootstrap_ci_with(data, cfg, |xs| compensated_sum(xs.iter().copied()) / xs.len() as f64)
}

/// Percentile bootstrap interval for an arbitrary statistic.
///
/// Iteration `i` draws from its own ChaCha8 stream (`seed`, stream `i`), and
/// results are merged in iteration order, so the interval does not depend on
/// how many rayon workers run the resamples.
pub fn bootstrap_ci_with<F>(data: &[f64], cfg: &BootstrapConfig, statistic: F) -> Result<(f64, f64), StatsError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if data.is_empty() {
        return Err(StatsError::EmptyData);
    }
    cfg.check()?;
    let n = data.len();
    let mut stats: Vec<f64> = (0..cfg.iterations)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(n),
            |buf, i| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64);
                buf.clear();
                buf.extend((0..n).map(|_| data[rng.gen_range(0..n)]));
                statistic(buf)
            },
        )
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - cfg.confidence;
    Ok((quantile_sorted(&stats, alpha / 2.0), quantile_sorted(&stats, 1.0 - alpha / 2.0)))
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}
