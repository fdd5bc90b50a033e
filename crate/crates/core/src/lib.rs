//! Entropy-gated early stopping for multi-step LLM reasoning.
//!
//! The crate computes sequence-level Shannon entropy from top-k token
//! logprobs, calibrates stopping thresholds from labeled examples, replays
//! recorded traces to measure savings and accuracy, plans fixed call budgets,
//! and drives OpenAI-compatible endpoints with the gate applied live.

pub mod budget;
pub mod client;
pub mod entropy;
pub mod replay;
pub mod stats;
pub mod synth;
pub mod threshold;
pub mod trace;

pub use client::{run_budget, run_question, EndpointConfig, LiveGateConfig};
pub use budget::{plan_budget, plan_budget_anonymous, verify_conservation, BudgetParams, BudgetPlan};
pub use entropy::{mean_entropy, normalize_logprobs, profile_completion, token_entropy, EntropyProfile, TokenLogprobs};
pub use replay::{evaluate, evaluate_tau, gate_question, GateOutcome, ReplayReport};
pub use stats::{bootstrap_ci, effect_band, independent_t_test, BootstrapConfig};
pub use synth::{synthesize_traces, SynthSpec};
pub use threshold::{calibrate, compute_stats, CalibrationStats, ThresholdDecision, ThresholdMethod};
pub use trace::{load_traces, save_traces, QuestionTrace, StepTrace, TraceSet};
