//! Offline replay of the entropy gate over recorded traces.
//!
//! For each question the step-1 mean entropy is compared with `tau`. Gated
//! questions (`H <= tau`) keep their step-1 answer and cost only step-1
//! tokens; the rest use every recorded step. The full-chain baseline is the
//! correctness label after the last recorded step.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{profile_completion, EntropyError};
use crate::stats::{bootstrap_ci, cohens_d, BootstrapConfig, Moments, Statistic, StatsError};
use crate::threshold::{
    calibrate, CalibrateOptions, CalibrationError, LabeledEntropy, ThresholdDecision, ThresholdMethod,
};
use crate::trace::{QuestionTrace, TraceSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("trace set has no questions")]
    EmptyTraceSet,
    #[error("question {question_id}: step 1 has no usable logprobs ({source})")]
    MissingStep1Logprobs {
        question_id: String,
        source: EntropyError,
    },
    #[error("k = {k} exceeds the recorded top-k width {recorded}")]
    KExceedsRecorded { k: usize, recorded: usize },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("report export: {0}")]
    Export(String),
}

/// What the gate did for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub question_id: String,
    pub step1_entropy: f64,
    pub gated: bool,
    pub steps_used: usize,
    pub tokens_used: u64,
    pub step1_correct: bool,
    /// Correctness after every recorded step.
    pub baseline_correct: bool,
    /// Correctness of the answer the gated policy returns.
    pub final_correct: bool,
}

fn step1_entropy(q: &QuestionTrace, k_limit: usize) -> Result<f64, ReplayError> {
    let missing = |source| ReplayError::MissingStep1Logprobs {
        question_id: q.question_id.clone(),
        source,
    };
    let step = q
        .step1()
        .ok_or_else(|| missing(EntropyError::MissingLogprobs { step_index: 1 }))?;
    profile_completion(step, k_limit).map(|p| p.mean).map_err(missing)
}

fn outcome_for(q: &QuestionTrace, entropy: f64, tau: f64) -> GateOutcome {
    let gated = entropy <= tau;
    let steps_used = if gated { 1 } else { q.steps.len() };
    let tokens_used = q.steps[..steps_used]
        .iter()
        .map(|s| u64::from(s.token_count))
        .sum();
    GateOutcome {
        question_id: q.question_id.clone(),
        step1_entropy: entropy,
        gated,
        steps_used,
        tokens_used,
        step1_correct: q.step1_correct(),
        baseline_correct: q.final_correct(),
        final_correct: if gated { q.step1_correct() } else { q.final_correct() },
    }
}

/// Applies the gate to one question.
pub fn gate_question(q: &QuestionTrace, tau: f64, k_limit: usize) -> Result<GateOutcome, ReplayError> {
    Ok(outcome_for(q, step1_entropy(q, k_limit)?, tau))
}

/// Step-1 mean entropies in question order.
pub fn step1_entropies(traces: &TraceSet, k_limit: usize) -> Result<Vec<f64>, ReplayError> {
    traces
        .questions
        .par_iter()
        .map(|q| step1_entropy(q, k_limit))
        .collect()
}

/// Labeled step-1 entropies for threshold calibration.
pub fn calibration_samples(traces: &TraceSet, k_limit: usize) -> Result<Vec<LabeledEntropy>, ReplayError> {
    Ok(step1_entropies(traces, k_limit)?
        .into_iter()
        .zip(&traces.questions)
        .map(|(entropy, q)| LabeledEntropy { entropy, correct: q.step1_correct() })
        .collect())
}

/// Aggregate metrics of one gated replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub model: String,
    pub dataset: String,
    pub method: Option<ThresholdMethod>,
    pub k: usize,
    pub tau: f64,
    pub step1_acc: f64,
    /// Accuracy after the final recorded step (the full-reasoning baseline).
    pub fourstep_acc: f64,
    /// Baseline accuracy of the gated subset; `None` when nothing gated.
    pub thresh_acc: Option<f64>,
    /// Accuracy of the gated policy.
    pub overall_acc: f64,
    /// `overall_acc - fourstep_acc`.
    pub delta_acc: f64,
    /// Fraction of questions stopped after step 1 (the paper-comparable
    /// "token savings" figure).
    pub stop_rate: f64,
    /// `1 - tokens_used / baseline_tokens` from recorded token counts.
    pub token_savings_tokens: f64,
    /// Step-1 entropy effect size, incorrect vs correct at step 1.
    pub cohens_d: Option<f64>,
    /// Percentile bootstrap interval on `delta_acc`.
    pub ci95: (f64, f64),
    pub n_gated: usize,
    pub n_total: usize,
    pub tokens_used: u64,
    pub baseline_tokens: u64,
}

/// Replays with a fixed threshold.
pub fn evaluate_tau(
    traces: &TraceSet,
    tau: f64,
    method: Option<ThresholdMethod>,
    k_limit: usize,
    boot: &BootstrapConfig,
) -> Result<ReplayReport, ReplayError> {
    let entropies = step1_entropies(traces, k_limit)?;
    report_from_entropies(traces, &entropies, tau, method, k_limit, boot)
}

/// Replays with a calibrated threshold decision.
pub fn evaluate(
    traces: &TraceSet,
    decision: &ThresholdDecision,
    k_limit: usize,
    boot: &BootstrapConfig,
) -> Result<ReplayReport, ReplayError> {
    evaluate_tau(traces, decision.tau, Some(decision.method), k_limit, boot)
}

/// Per-question outcomes for a fixed threshold.
pub fn gate_all(traces: &TraceSet, tau: f64, k_limit: usize) -> Result<Vec<GateOutcome>, ReplayError> {
    let entropies = step1_entropies(traces, k_limit)?;
    Ok(traces
        .questions
        .iter()
        .zip(&entropies)
        .map(|(q, &h)| outcome_for(q, h, tau))
        .collect())
}

fn rate(num: usize, den: usize) -> f64 {
    num as f64 / den as f64
}

fn report_from_entropies(
    traces: &TraceSet,
    entropies: &[f64],
    tau: f64,
    method: Option<ThresholdMethod>,
    k_limit: usize,
    boot: &BootstrapConfig,
) -> Result<ReplayReport, ReplayError> {
    let n_total = traces.questions.len();
    if n_total == 0 {
        return Err(ReplayError::EmptyTraceSet);
    }
    let outcomes: Vec<GateOutcome> = traces
        .questions
        .iter()
        .zip(entropies)
        .map(|(q, &h)| outcome_for(q, h, tau))
        .collect();

    let count = |f: fn(&GateOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
    let n_gated = count(|o| o.gated);
    let step1_acc = rate(count(|o| o.step1_correct), n_total);
    let fourstep_acc = rate(count(|o| o.baseline_correct), n_total);
    let overall_acc = rate(count(|o| o.final_correct), n_total);
    let thresh_acc = (n_gated > 0).then(|| rate(count(|o| o.gated && o.baseline_correct), n_gated));

    let tokens_used: u64 = outcomes.iter().map(|o| o.tokens_used).sum();
    let baseline_tokens: u64 = traces.questions.iter().map(QuestionTrace::total_tokens).sum();
    let token_savings_tokens = if baseline_tokens > 0 {
        1.0 - tokens_used as f64 / baseline_tokens as f64
    } else {
        0.0
    };

    let (correct, incorrect): (Vec<f64>, Vec<f64>) = {
        let mut c = Vec::new();
        let mut i = Vec::new();
        for (o, &h) in outcomes.iter().zip(entropies) {
            if o.step1_correct { c.push(h) } else { i.push(h) }
        }
        (c, i)
    };
    let cohens = match (Moments::of(&correct), Moments::of(&incorrect)) {
        (Some(c), Some(i)) if c.n >= 2 && i.n >= 2 => cohens_d(c, i),
        _ => None,
    };

    // Per-question change in correctness caused by gating; its mean is delta_acc.
    let deltas: Vec<f64> = outcomes
        .iter()
        .map(|o| f64::from(u8::from(o.final_correct)) - f64::from(u8::from(o.baseline_correct)))
        .collect();
    let delta_acc = overall_acc - fourstep_acc;
    let ci95 = bootstrap_ci(&deltas, Statistic::Mean, boot)?;

    Ok(ReplayReport {
        model: traces.model_name.clone(),
        dataset: traces.dataset_label(),
        method,
        k: k_limit,
        tau,
        step1_acc,
        fourstep_acc,
        thresh_acc,
        overall_acc,
        delta_acc,
        stop_rate: rate(n_gated, n_total),
        token_savings_tokens,
        cohens_d: cohens,
        ci95,
        n_gated,
        n_total,
        tokens_used,
        baseline_tokens,
    })
}

/// One row of a threshold-method comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub decision: ThresholdDecision,
    pub report: ReplayReport,
}

/// Calibrates each method on the traces' own step-1 labels and replays it.
pub fn method_sweep(
    traces: &TraceSet,
    methods: &[ThresholdMethod],
    k_limit: usize,
    opts: CalibrateOptions,
    boot: &BootstrapConfig,
) -> Result<Vec<MethodRow>, ReplayError> {
    if methods.is_empty() {
        return Ok(Vec::new());
    }
    let entropies = step1_entropies(traces, k_limit)?;
    let samples: Vec<LabeledEntropy> = entropies
        .iter()
        .zip(&traces.questions)
        .map(|(&entropy, q)| LabeledEntropy { entropy, correct: q.step1_correct() })
        .collect();
    methods
        .iter()
        .map(|&m| {
            let decision = calibrate(&samples, m, opts)?;
            let report = report_from_entropies(traces, &entropies, decision.tau, Some(m), k_limit, boot)?;
            Ok(MethodRow { decision, report })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub tau: f64,
    pub cohens_d: Option<f64>,
    pub stop_rate: f64,
    pub thresh_acc: Option<f64>,
    pub report: ReplayReport,
}

/// Recomputes entropies at each truncation width, recalibrates `method`
/// there, and replays.
pub fn k_sweep(
    traces: &TraceSet,
    ks: &[usize],
    method: ThresholdMethod,
    opts: CalibrateOptions,
    boot: &BootstrapConfig,
) -> Result<Vec<KSweepRow>, ReplayError> {
    if let Some(&k) = ks.iter().find(|&&k| k > traces.k_logprobs || k == 0) {
        return Err(ReplayError::KExceedsRecorded { k, recorded: traces.k_logprobs });
    }
    ks.iter()
        .map(|&k| {
            let row = method_sweep(traces, &[method], k, opts, boot)?
                .pop()
                .expect("one method in, one row out");
            Ok(KSweepRow {
                k,
                tau: row.decision.tau,
                cohens_d: row.report.cohens_d,
                stop_rate: row.report.stop_rate,
                thresh_acc: row.report.thresh_acc,
                report: row.report,
            })
        })
        .collect()
}

/// Mean entropy at one refinement step, split by final correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub correct_mean: Option<f64>,
    pub incorrect_mean: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

/// Per-step class-mean entropies. Steps without recorded logprobs are skipped
/// for that question.
pub fn step_progression(traces: &TraceSet, k_limit: usize) -> Vec<StepRow> {
    let max_steps = traces.questions.iter().map(|q| q.steps.len()).max().unwrap_or(0);
    (1..=max_steps)
        .map(|s| {
            let mut correct = Vec::new();
            let mut incorrect = Vec::new();
            for q in &traces.questions {
                let Some(step) = q.steps.get(s - 1) else { continue };
                let Ok(p) = profile_completion(step, k_limit) else { continue };
                if q.final_correct() {
                    correct.push(p.mean);
                } else {
                    incorrect.push(p.mean);
                }
            }
            StepRow {
                step: s,
                correct_mean: Moments::of(&correct).map(|m| m.mean),
                incorrect_mean: Moments::of(&incorrect).map(|m| m.mean),
                n_correct: correct.len(),
                n_incorrect: incorrect.len(),
            }
        })
        .collect()
}

/// CSV columns of an exported report row.
pub const REPORT_COLUMNS: [&str; 18] = [
    "model",
    "dataset",
    "method",
    "k",
    "tau",
    "step1_acc",
    "fourstep_acc",
    "thresh_acc",
    "cohens_d",
    "token_savings",
    "delta_acc",
    "ci95_lo",
    "ci95_hi",
    "overall_acc",
    "stop_rate",
    "token_savings_tokens",
    "n_gated",
    "n_total",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one CSV row per report. `token_savings` repeats `stop_rate`, the
/// fraction of questions stopped early; `token_savings_tokens` is the
/// reduction in recorded tokens.
pub fn write_reports_csv<'a>(
    reports: impl IntoIterator<Item = &'a ReplayReport>,
    w: impl Write,
) -> Result<(), ReplayError> {
    let err = |e: csv::Error| ReplayError::Export(e.to_string());
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(REPORT_COLUMNS).map_err(err)?;
    for r in reports {
        wtr.write_record([
            r.model.clone(),
            r.dataset.clone(),
            r.method.map(|m| m.to_string()).unwrap_or_else(|| "fixed".into()),
            r.k.to_string(),
            r.tau.to_string(),
            r.step1_acc.to_string(),
            r.fourstep_acc.to_string(),
            opt(r.thresh_acc),
            opt(r.cohens_d),
            r.stop_rate.to_string(),
            r.delta_acc.to_string(),
            r.ci95.0.to_string(),
            r.ci95.1.to_string(),
            r.overall_acc.to_string(),
            r.stop_rate.to_string(),
            r.token_savings_tokens.to_string(),
            r.n_gated.to_string(),
            r.n_total.to_string(),
        ])
        .map_err(err)?;
    }
    wtr.flush().map_err(|e| ReplayError::Export(e.to_string()))
}
