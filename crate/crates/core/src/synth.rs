//! Synthetic trace generation for desk-scale experiments.
//!
//! Step-1 mean entropies are drawn from class-conditional Gaussians and each
//! step's logprobs are fabricated so that the recomputed mean entropy equals
//! the drawn target. Every fabricated token uses the two-point family
//! `(p, (1-p)/(k-1), ..., (1-p)/(k-1))`, with `p` found by bisection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{truncated_token_entropy, TokenLogprobs, TopLogprob, MAX_TOP_K};
use crate::trace::{QuestionTrace, StepTrace, TraceSet, MAX_STEPS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("infeasible generator spec: {0}")]
    InfeasibleSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMoments {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRange {
    pub min: u32,
    pub max: u32,
}

/// Answer format used when fabricating gold and extracted answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    #[default]
    Integer,
    Choice,
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub model_name: String,
    pub dataset: String,
    pub questions: usize,
    /// Step-1 entropy distribution of questions answered correctly at step 1.
    pub correct: ClassMoments,
    /// Step-1 entropy distribution of questions answered incorrectly at step 1.
    pub incorrect: ClassMoments,
    pub step1_accuracy: f64,
    /// Accuracy after the final step; must be at least `step1_accuracy`.
    pub final_accuracy: f64,
    pub steps: usize,
    pub k_logprobs: usize,
    pub temperature: f64,
    pub tokens_per_step: TokenRange,
    pub answer_format: AnswerFormat,
    /// Standardize each class sample so its mean and sample SD equal the targets.
    pub exact_moments: bool,
    /// Step-1-incorrect questions at or below this entropy are never repaired
    /// by later steps.
    pub protect_below: Option<f64>,
    /// Added to a question's entropy for every step after the first.
    pub per_step_drift: f64,
    /// Record per-token logprobs on steps after the first.
    pub logprobs_all_steps: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            model_name: "synthetic".into(),
            dataset: "synthetic".into(),
            questions: 30,
            correct: ClassMoments { mean: 0.3, sd: 0.1 },
            incorrect: ClassMoments { mean: 0.5, sd: 0.1 },
            step1_accuracy: 0.7,
            final_accuracy: 0.7,
            steps: 4,
            k_logprobs: 20,
            temperature: 0.7,
            tokens_per_step: TokenRange { min: 4, max: 24 },
            answer_format: AnswerFormat::Integer,
            exact_moments: false,
            protect_below: None,
            per_step_drift: 0.0,
            logprobs_all_steps: true,
        }
    }
}

impl SynthSpec {
    fn check(&self) -> Result<(usize, usize), SynthError> {
        let bad = |m: String| Err(SynthError::InfeasibleSpec(m));
        if self.questions == 0 {
            return bad("questions must be positive".into());
        }
        for (name, acc) in [("step1_accuracy", self.step1_accuracy), ("final_accuracy", self.final_accuracy)] {
            if !(0.0..=1.0).contains(&acc) {
                return bad(format!("{name} {acc} outside [0, 1]"));
            }
        }
        for (name, m) in [("correct", self.correct), ("incorrect", self.incorrect)] {
            if !m.mean.is_finite() || !m.sd.is_finite() || m.sd < 0.0 {
                return bad(format!("{name} moments invalid: mean {} sd {}", m.mean, m.sd));
            }
        }
        if !(1..=MAX_STEPS).contains(&self.steps) {
            return bad(format!("steps {} outside [1, {MAX_STEPS}]", self.steps));
        }
        if !(2..=MAX_TOP_K).contains(&self.k_logprobs) {
            return bad(format!("k_logprobs {} outside [2, {MAX_TOP_K}]", self.k_logprobs));
        }
        let r = self.tokens_per_step;
        if r.min == 0 || r.min > r.max {
            return bad(format!("tokens_per_step [{}, {}] invalid", r.min, r.max));
        }
        let n_step1 = (self.step1_accuracy * self.questions as f64).round() as usize;
        let n_final = (self.final_accuracy * self.questions as f64).round() as usize;
        if n_final < n_step1 {
            return bad(format!(
                "final accuracy ({n_final} correct) below step-1 accuracy ({n_step1} correct)"
            ));
        }
        if n_final > n_step1 && self.steps < 2 {
            return bad("accuracy uplift requires at least 2 steps".into());
        }
        Ok((n_step1, n_final))
    }
}

/// Token distribution `(p, q, ..., q)` over `k` alternatives with `q = (1-p)/(k-1)`.
fn two_point_entropy(p: f64, k: usize) -> f64 {
    let q = (1.0 - p) / (k as f64 - 1.0);
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.log2();
    }
    if q > 0.0 {
        h -= (k as f64 - 1.0) * q * q.log2();
    }
    h
}

/// Finds the top-token probability whose two-point distribution has entropy `target` bits.
pub fn solve_top_probability(target: f64, k: usize) -> f64 {
    let mut lo = 1.0 / k as f64; // entropy log2 k
    let mut hi = 1.0 - f64::EPSILON; // entropy ~0
    let target = target.clamp(0.0, (k as f64).log2());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if two_point_entropy(mid, k) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// One fabricated token whose renormalized entropy equals `target` bits.
pub fn token_with_entropy(target: f64, k: usize) -> TokenLogprobs {
    let p = solve_top_probability(target, k);
    let q = (1.0 - p) / (k as f64 - 1.0);
    let mut entries = Vec::with_capacity(k);
    entries.push(TopLogprob {
        token: "<top>".into(),
        logprob: p.ln(),
    });
    entries.extend((1..k).map(|i| TopLogprob {
        token: format!("<alt{i}>"),
        logprob: q.ln(),
    }));
    TokenLogprobs::new(entries).expect("fabricated logprobs are finite")
}

fn draw_class(rng: &mut ChaCha8Rng, n: usize, m: ClassMoments, exact: bool) -> Vec<f64> {
    let mut z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    if exact && n >= 2 {
        let mean = z.iter().sum::<f64>() / n as f64;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        for v in &mut z {
            *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
        }
    } else if exact {
        z.iter_mut().for_each(|v| *v = 0.0);
    }
    z.into_iter().map(|v| m.mean + m.sd * v).collect()
}

/// Generates a deterministic synthetic [`TraceSet`] from `spec` and `seed`.
pub fn synthesize_traces(spec: &SynthSpec, seed: u64) -> Result<TraceSet, SynthError> {
    let (n_step1, n_final) = spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.questions;
    let k = spec.k_logprobs;
    let h_max = (k as f64).log2();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut step1_correct = vec![false; n];
    for &i in &order[..n_step1] {
        step1_correct[i] = true;
    }

    let correct_h = draw_class(&mut rng, n_step1, spec.correct, spec.exact_moments);
    let incorrect_h = draw_class(&mut rng, n - n_step1, spec.incorrect, spec.exact_moments);
    let mut entropy = vec![0.0; n];
    let mut step1_tokens = Vec::with_capacity(n);
    let (mut ci, mut ii) = (correct_h.into_iter(), incorrect_h.into_iter());
    for q in 0..n {
        let h = if step1_correct[q] { ci.next() } else { ii.next() };
        let token = token_with_entropy(h.expect("class sizes match labels").clamp(0.0, h_max), k);
        // Realized (recomputed) entropy, so later comparisons agree with replay.
        entropy[q] = truncated_token_entropy(&token, k).expect("fabricated token is valid");
        step1_tokens.push(token);
    }

    // Step-1-incorrect questions repaired by refinement, and the step at which
    // the repair lands.
    let mut eligible: Vec<usize> = (0..n)
        .filter(|&q| !step1_correct[q])
        .filter(|&q| spec.protect_below.is_none_or(|t| entropy[q] > t))
        .collect();
    let needed = n_final - n_step1;
    if eligible.len() < needed {
        return Err(SynthError::InfeasibleSpec(format!(
            "{needed} repairs needed but only {} step-1-incorrect questions are eligible",
            eligible.len()
        )));
    }
    eligible.shuffle(&mut rng);
    let mut repaired_at = vec![None; n];
    for &q in &eligible[..needed] {
        repaired_at[q] = Some(rng.gen_range(2..=spec.steps));
    }

    let mut set = TraceSet::new(spec.model_name.clone(), k, spec.temperature);
    for q in 0..n {
        let gold = match spec.answer_format {
            AnswerFormat::Integer => rng.gen_range(0..1000u32).to_string(),
            AnswerFormat::Choice => ["A", "B", "C", "D"][rng.gen_range(0..4)].to_string(),
        };
        let wrong = match spec.answer_format {
            AnswerFormat::Integer => ((gold.parse::<u32>().unwrap() + 1) % 1000).to_string(),
            AnswerFormat::Choice => {
                let c = gold.as_bytes()[0] - b'A';
                ((b'A' + (c + 1) % 4) as char).to_string()
            }
        };
        let final_correct_class = step1_correct[q] || repaired_at[q].is_some();
        let mut steps = Vec::with_capacity(spec.steps);
        let mut step_correct = Vec::with_capacity(spec.steps);
        for s in 1..=spec.steps {
            let correct = step1_correct[q] || repaired_at[q].is_some_and(|r| s >= r);
            let answer = if correct { &gold } else { &wrong };
            let h = if s == 1 {
                entropy[q]
            } else {
                let base = if final_correct_class && !step1_correct[q] {
                    // Repaired questions move toward the correct class entropy.
                    spec.correct.mean
                } else {
                    entropy[q]
                };
                (base + spec.per_step_drift * (s - 1) as f64).clamp(0.0, h_max)
            };
            let token_count = rng.gen_range(spec.tokens_per_step.min..=spec.tokens_per_step.max);
            let tokens = if s == 1 {
                vec![step1_tokens[q].clone(); token_count as usize]
            } else if spec.logprobs_all_steps {
                vec![token_with_entropy(h, k); token_count as usize]
            } else {
                Vec::new()
            };
            steps.push(StepTrace {
                step_index: s as u32,
                completion_text: format!("Step {s} reasoning. The answer is {answer}."),
                token_count,
                tokens,
                extracted_answer: Some(answer.clone()),
            });
            step_correct.push(correct);
        }
        set.questions.push(QuestionTrace {
            question_id: format!("{}-{:04}", spec.dataset, q + 1),
            dataset: spec.dataset.clone(),
            gold_answer: gold,
            steps,
            step_correct,
        });
    }
    Ok(set)
}
