//! Early-stopping thresholds from labeled calibration entropies.
//!
//! Four closed-form rules are provided, each consuming the per-class sample
//! moments of step-1 mean entropy (bits) plus Cohen's d:
//!
//! | method            | threshold                                                        |
//! |-------------------|------------------------------------------------------------------|
//! | `mean`            | `mu_c`                                                           |
//! | `info-optimal`    | `mu_c + sigma_c * ln(1 + |d|)`                                   |
//! | `bayes-optimal`   | crossing point of the two class Gaussians' log-likelihoods       |
//! | `scale-universal` | `mu_c + s/(1+s) * (mu_i - mu_c) * max(0, 1 - sigma_c/mu_c)`, `s = sqrt|d|` |
//!
//! The natural logs in these formulas act on dimensionless quantities, so the
//! bit-valued entropies are used as-is.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{cohens_d, Moments};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("{class} class has {have} samples; need at least {need}")]
    InsufficientSamples {
        class: &'static str,
        have: usize,
        need: usize,
    },
    #[error("both classes have zero spread but different means; Cohen's d is undefined")]
    DegeneratePooledSigma,
    #[error("entropy sample {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("bayes-optimal threshold needs a non-zero standard deviation in at least one class")]
    ZeroVariance,
    #[error("scale-universal threshold needs a positive correct-class mean, got {0}")]
    NonPositiveCorrectMean(f64),
    #[error("{method} needs at least {need} labeled samples, have {have} (pass --allow-undersampled to override)")]
    BelowSampleFloor {
        method: ThresholdMethod,
        have: usize,
        need: usize,
    },
    #[error("calibration samples contain no {missing} examples; {method} needs both classes")]
    SingleClassOnly {
        method: ThresholdMethod,
        missing: &'static str,
    },
    #[error("unknown threshold method {0:?}")]
    UnknownMethod(String),
    #[error("calibration file: {0}")]
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMethod {
    Mean,
    InfoOptimal,
    BayesOptimal,
    ScaleUniversal,
}

impl ThresholdMethod {
    pub const ALL: [ThresholdMethod; 4] = [
        ThresholdMethod::InfoOptimal,
        ThresholdMethod::BayesOptimal,
        ThresholdMethod::ScaleUniversal,
        ThresholdMethod::Mean,
    ];

    /// Recommended minimum number of labeled calibration samples.
    pub fn sample_floor(self) -> usize {
        match self {
            ThresholdMethod::Mean => 5,
            ThresholdMethod::InfoOptimal => 15,
            ThresholdMethod::BayesOptimal | ThresholdMethod::ScaleUniversal => 25,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdMethod::Mean => "mean",
            ThresholdMethod::InfoOptimal => "info-optimal",
            ThresholdMethod::BayesOptimal => "bayes-optimal",
            ThresholdMethod::ScaleUniversal => "scale-universal",
        }
    }
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThresholdMethod {
    type Err = CalibrationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mean" | "entropy-mean" => Ok(ThresholdMethod::Mean),
            "info-optimal" | "info" | "information-theoretic" => Ok(ThresholdMethod::InfoOptimal),
            "bayes-optimal" | "bayes" | "bayesian" => Ok(ThresholdMethod::BayesOptimal),
            "scale-universal" | "universal" | "scale-invariant" => Ok(ThresholdMethod::ScaleUniversal),
            _ => Err(CalibrationError::UnknownMethod(s.to_string())),
        }
    }
}

/// Sufficient statistics for every threshold rule.
///
/// `sigma_*` are sample standard deviations. `n_i == 0` marks a single-class
/// calibration, which only the mean rule accepts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub mu_c: f64,
    pub sigma_c: f64,
    pub n_c: usize,
    pub mu_i: f64,
    pub sigma_i: f64,
    pub n_i: usize,
    pub d: f64,
}

impl CalibrationStats {
    pub fn from_moments(correct: Moments, incorrect: Moments) -> Result<Self, CalibrationError> {
        let d = cohens_d(correct, incorrect).ok_or(CalibrationError::DegeneratePooledSigma)?;
        Ok(Self {
            mu_c: correct.mean,
            sigma_c: correct.sd,
            n_c: correct.n,
            mu_i: incorrect.mean,
            sigma_i: incorrect.sd,
            n_i: incorrect.n,
            d,
        })
    }

    /// Replaces `d` with an externally reported value (e.g. a published effect size).
    pub fn with_effect_size(mut self, d: f64) -> Self {
        self.d = d;
        self
    }

    /// Cohen's d recomputed from the six moment fields.
    pub fn pooled_d(&self) -> Option<f64> {
        cohens_d(self.correct(), self.incorrect())
    }

    pub fn correct(&self) -> Moments {
        Moments { mean: self.mu_c, sd: self.sigma_c, n: self.n_c }
    }

    pub fn incorrect(&self) -> Moments {
        Moments { mean: self.mu_i, sd: self.sigma_i, n: self.n_i }
    }

    pub fn is_single_class(&self) -> bool {
        self.n_i == 0
    }
}

/// Per-class sample moments and pooled Cohen's d.
pub fn compute_stats(correct: &[f64], incorrect: &[f64]) -> Result<CalibrationStats, CalibrationError> {
    for (class, xs) in [("correct", correct), ("incorrect", incorrect)] {
        if xs.len() < 2 {
            return Err(CalibrationError::InsufficientSamples {
                class,
                have: xs.len(),
                need: 2,
            });
        }
        check_finite(xs)?;
    }
    CalibrationStats::from_moments(Moments::of(correct).unwrap(), Moments::of(incorrect).unwrap())
}

fn check_finite(xs: &[f64]) -> Result<(), CalibrationError> {
    match xs.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        Some((index, &value)) => Err(CalibrationError::NonFinite { index, value }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDecision {
    pub method: ThresholdMethod,
    /// Entropy threshold in bits; gate when `H <= tau`.
    pub tau: f64,
    pub stats: CalibrationStats,
    pub notes: Vec<String>,
}

impl ThresholdDecision {
    fn new(method: ThresholdMethod, tau: f64, stats: CalibrationStats) -> Self {
        Self { method, tau, stats, notes: Vec::new() }
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }
}

pub fn threshold_mean(stats: &CalibrationStats) -> ThresholdDecision {
    ThresholdDecision::new(ThresholdMethod::Mean, stats.mu_c, *stats)
}

pub fn threshold_info_optimal(stats: &CalibrationStats) -> ThresholdDecision {
    let tau = stats.mu_c + stats.sigma_c * stats.d.abs().ln_1p();
    ThresholdDecision::new(ThresholdMethod::InfoOptimal, tau, *stats)
}

/// Roots of `a x² + b x + c = 0`, or `None` when complex.
///
/// Uses the cancellation-free form `q = -(b + sign(b) sqrt(disc)) / 2`.
fn real_quadratic_roots(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + if b >= 0.0 { sq } else { -sq });
    if q == 0.0 {
        // b == 0 and c == 0: double root at zero.
        return Some((0.0, 0.0));
    }
    Some((q / a, c / q))
}

/// Decision boundary of two Gaussians `N(mu_c, sigma_c²)` and `N(mu_i, sigma_i²)`.
///
/// Solves `a τ² + b τ + c = 0` with
/// `a = 1/sigma_i² - 1/sigma_c²`, `b = 2(mu_c/sigma_c² - mu_i/sigma_i²)`,
/// `c = mu_i²/sigma_i² - mu_c²/sigma_c² + 2 ln(sigma_i/sigma_c)`.
/// A root inside `[min(mu), max(mu)]` is preferred, then the root closest to
/// that interval. Complex roots, or a single zero-variance class, fall back to
/// the midpoint of the means. `notes` records the branch taken.
pub fn threshold_bayes_optimal(stats: &CalibrationStats) -> Result<ThresholdDecision, CalibrationError> {
    let (mc, sc, mi, si) = (stats.mu_c, stats.sigma_c, stats.mu_i, stats.sigma_i);
    let midpoint = 0.5 * (mc + mi);
    let decision = |tau| ThresholdDecision::new(ThresholdMethod::BayesOptimal, tau, *stats);
    if sc == 0.0 && si == 0.0 {
        return Err(CalibrationError::ZeroVariance);
    }
    if sc == 0.0 || si == 0.0 {
        return Ok(decision(midpoint).note("one class has zero variance: midpoint fallback"));
    }
    if sc == si {
        return Ok(decision(midpoint).note("equal variances: linear case, midpoint of means"));
    }
    let (vc, vi) = (sc * sc, si * si);
    let a = 1.0 / vi - 1.0 / vc;
    let b = 2.0 * (mc / vc - mi / vi);
    let c = mi * mi / vi - mc * mc / vc + 2.0 * (si / sc).ln();
    let Some((r1, r2)) = real_quadratic_roots(a, b, c) else {
        return Ok(decision(midpoint).note("negative discriminant: midpoint fallback"));
    };
    let (lo, hi) = (mc.min(mi), mc.max(mi));
    let distance = |r: f64| if r < lo { lo - r } else if r > hi { r - hi } else { 0.0 };
    let inside = |r: f64| distance(r) == 0.0;
    let (chosen, rejected, branch) = match (inside(r1), inside(r2)) {
        (true, false) => (r1, r2, "root inside mean interval"),
        (false, true) => (r2, r1, "root inside mean interval"),
        (true, true) => {
            if (r1 - midpoint).abs() <= (r2 - midpoint).abs() {
                (r1, r2, "both roots inside mean interval: closest to midpoint")
            } else {
                (r2, r1, "both roots inside mean interval: closest to midpoint")
            }
        }
        (false, false) => {
            if distance(r1) <= distance(r2) {
                (r1, r2, "no root inside mean interval: closest root")
            } else {
                (r2, r1, "no root inside mean interval: closest root")
            }
        }
    };
    Ok(decision(chosen).note(format!("{branch}; rejected root {rejected}")))
}

pub fn threshold_scale_universal(stats: &CalibrationStats) -> Result<ThresholdDecision, CalibrationError> {
    if stats.mu_c.is_nan() || stats.mu_c <= 0.0 {
        return Err(CalibrationError::NonPositiveCorrectMean(stats.mu_c));
    }
    let s = stats.d.abs().sqrt();
    let cv_factor = (1.0 - stats.sigma_c / stats.mu_c).max(0.0);
    let tau = stats.mu_c + s / (1.0 + s) * (stats.mu_i - stats.mu_c) * cv_factor;
    let decision = ThresholdDecision::new(ThresholdMethod::ScaleUniversal, tau, *stats);
    Ok(if cv_factor == 0.0 {
        decision.note("coefficient of variation >= 1: scaling clamped to zero")
    } else {
        decision
    })
}

pub fn threshold_for(method: ThresholdMethod, stats: &CalibrationStats) -> Result<ThresholdDecision, CalibrationError> {
    if stats.is_single_class() && method != ThresholdMethod::Mean {
        return Err(CalibrationError::SingleClassOnly { method, missing: "incorrect" });
    }
    match method {
        ThresholdMethod::Mean => Ok(threshold_mean(stats)),
        ThresholdMethod::InfoOptimal => Ok(threshold_info_optimal(stats)),
        ThresholdMethod::BayesOptimal => threshold_bayes_optimal(stats),
        ThresholdMethod::ScaleUniversal => threshold_scale_universal(stats),
    }
}

/// One labeled calibration observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledEntropy {
    pub entropy: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CalibrateOptions {
    pub allow_undersampled: bool,
}

/// Few-shot calibration: partition by correctness, compute stats, apply `method`.
pub fn calibrate(
    samples: &[LabeledEntropy],
    method: ThresholdMethod,
    opts: CalibrateOptions,
) -> Result<ThresholdDecision, CalibrationError> {
    let need = method.sample_floor();
    let undersampled = samples.len() < need;
    if undersampled && !opts.allow_undersampled {
        return Err(CalibrationError::BelowSampleFloor {
            method,
            have: samples.len(),
            need,
        });
    }
    let (correct, incorrect): (Vec<&LabeledEntropy>, Vec<&LabeledEntropy>) =
        samples.iter().partition(|s| s.correct);
    let correct: Vec<f64> = correct.iter().map(|s| s.entropy).collect();
    let incorrect: Vec<f64> = incorrect.iter().map(|s| s.entropy).collect();
    check_finite(&correct)?;
    check_finite(&incorrect)?;

    let mut decision = if correct.is_empty() {
        return Err(CalibrationError::SingleClassOnly { method, missing: "correct" });
    } else if incorrect.is_empty() {
        if method != ThresholdMethod::Mean {
            return Err(CalibrationError::SingleClassOnly { method, missing: "incorrect" });
        }
        let m = Moments::of(&correct).unwrap();
        let stats = CalibrationStats {
            mu_c: m.mean,
            sigma_c: m.sd,
            n_c: m.n,
            mu_i: 0.0,
            sigma_i: 0.0,
            n_i: 0,
            d: 0.0,
        };
        threshold_mean(&stats).note("single-class calibration: no incorrect samples")
    } else if method == ThresholdMethod::Mean && (correct.len() < 2 || incorrect.len() < 2) {
        // The mean rule only needs mu_c; report what moments exist.
        let (c, i) = (Moments::of(&correct).unwrap(), Moments::of(&incorrect).unwrap());
        let stats = CalibrationStats {
            mu_c: c.mean,
            sigma_c: c.sd,
            n_c: c.n,
            mu_i: i.mean,
            sigma_i: i.sd,
            n_i: i.n,
            d: cohens_d(c, i).unwrap_or(f64::NAN),
        };
        threshold_mean(&stats).note("fewer than 2 samples in a class: dispersion unavailable")
    } else {
        threshold_for(method, &compute_stats(&correct, &incorrect)?)?
    };
    if undersampled {
        decision.notes.push(format!(
            "undersampled override: {} samples below recommended {need}",
            samples.len()
        ));
    }
    Ok(decision)
}

/// Reads `entropy,correct` records. A header row is optional; flags accept
/// `true/false`, `1/0`, `yes/no`, `correct/incorrect`.
pub fn read_samples_csv(reader: impl Read) -> Result<Vec<LabeledEntropy>, CalibrationError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CalibrationError::File(e.to_string()))?;
        let bad = |m: &str| CalibrationError::File(format!("record {}: {m}", i + 1));
        if rec.len() < 2 {
            return Err(bad("expected 2 fields"));
        }
        let entropy = match rec[0].parse::<f64>() {
            Ok(v) => v,
            Err(_) if i == 0 => continue, // header
            Err(_) => return Err(bad("entropy is not a number")),
        };
        let correct = match rec[1].to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "correct" | "y" | "t" => true,
            "false" | "0" | "no" | "incorrect" | "n" | "f" => false,
            _ => return Err(bad("unrecognized correctness flag")),
        };
        out.push(LabeledEntropy { entropy, correct });
    }
    Ok(out)
}

/// Persisted calibration: what the gateway hot-reloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub method: ThresholdMethod,
    pub tau: f64,
    pub mu_c: f64,
    pub sigma_c: f64,
    pub mu_i: f64,
    pub sigma_i: f64,
    pub n_c: usize,
    pub n_i: usize,
    pub d: f64,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl CalibrationRecord {
    pub fn from_decision(decision: &ThresholdDecision) -> Self {
        let s = &decision.stats;
        Self {
            method: decision.method,
            tau: decision.tau,
            mu_c: s.mu_c,
            sigma_c: s.sigma_c,
            mu_i: s.mu_i,
            sigma_i: s.sigma_i,
            n_c: s.n_c,
            n_i: s.n_i,
            d: s.d,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), CalibrationError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.serialize(self).map_err(|e| CalibrationError::File(e.to_string()))?;
        wtr.flush().map_err(|e| CalibrationError::File(e.to_string()))
    }

    pub fn read_csv(r: impl Read) -> Result<Self, CalibrationError> {
        let mut rdr = csv::Reader::from_reader(r);
        let rec: Option<Result<Self, _>> = rdr.deserialize().next();
        let rec = rec
            .ok_or_else(|| CalibrationError::File("no calibration record".into()))?
            .map_err(|e| CalibrationError::File(e.to_string()))?;
        if !rec.tau.is_finite() {
            return Err(CalibrationError::File(format!("tau is not finite ({})", rec.tau)));
        }
        Ok(rec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CalibrationError> {
        let f = std::fs::File::create(path).map_err(|e| CalibrationError::File(e.to_string()))?;
        self.write_csv(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        let f = std::fs::File::open(path).map_err(|e| CalibrationError::File(e.to_string()))?;
        Self::read_csv(f)
    }
}
