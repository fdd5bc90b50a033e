//! Driver for OpenAI-compatible chat-completion endpoints.
//!
//! A question is asked once, the step-1 completion's mean entropy is checked
//! against the live gate, and only uncertain questions get refinement turns.
//! Every step's text and top-k logprobs are recorded as a [`QuestionTrace`].

mod answer;
pub mod protocol;
pub mod testing;
mod transport;

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use answer::{answers_match, extract_answer, majority_vote, DatasetKind};
pub use protocol::{build_request, message, parse_completion, ParsedCompletion};
pub use transport::{send_with_retry, ChatTransport, HttpTransport, RawResponse, RetryPolicy, TransportFailure};

use crate::entropy::{profile_completion, EntropyError, MAX_TOP_K};
use crate::trace::{QuestionTrace, StepTrace, MAX_STEPS};

pub const DEFAULT_REFINE_PROMPT: &str =
    "Continue reasoning. Re-examine your work and refine your final answer.";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("provider returned status {status}: {body}")]
    ProviderError { status: u16, body: String },
    #[error("provider response carries no per-token top-k logprobs")]
    LogprobsUnsupported,
    #[error("request timed out")]
    Timeout,
    #[error("gave up after {attempts} attempts; last failure: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("invalid client configuration: {0}")]
    InvalidConfig(String),
    #[error("plan does not match questions: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("reading questions: {0}")]
    Input(String),
}

/// API key that never shows up in logs or debug output.
#[derive(Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(***)")
    }
}

/// Where to send requests and how to shape them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Base URL up to and including the version segment, e.g. `https://host/v1`.
    pub base_url: String,
    /// Literal key; usually left unset in favour of `api_key_env`.
    #[serde(skip_serializing)]
    pub api_key: Option<ApiKey>,
    pub api_key_env: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens_per_step: u32,
    pub top_logprobs: usize,
    pub max_steps: usize,
    pub request_timeout_secs: u64,
    pub retry: RetryPolicy,
    pub refine_prompt: String,
    /// Provider-specific fields copied verbatim into every request
    /// (for example `reasoning_effort`).
    pub extra: Map<String, Value>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key: None,
            api_key_env: Some("OPENAI_API_KEY".into()),
            model: String::new(),
            temperature: 0.7,
            max_tokens_per_step: 8192,
            top_logprobs: 20,
            max_steps: 4,
            request_timeout_secs: 600,
            retry: RetryPolicy::default(),
            refine_prompt: DEFAULT_REFINE_PROMPT.into(),
            extra: Map::new(),
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(1..=MAX_TOP_K).contains(&self.top_logprobs) {
            return Err(ClientError::InvalidConfig(format!(
                "top_logprobs must be in [1, {MAX_TOP_K}], got {}",
                self.top_logprobs
            )));
        }
        if !(1..=MAX_STEPS).contains(&self.max_steps) {
            return Err(ClientError::InvalidConfig(format!(
                "max_steps must be in [1, {MAX_STEPS}], got {}",
                self.max_steps
            )));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ClientError::InvalidConfig("temperature must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.request_timeout_secs.max(1))
    }

    /// The literal key if set, otherwise the named environment variable.
    pub fn resolve_api_key(&self) -> Option<ApiKey> {
        self.api_key.clone().or_else(|| {
            self.api_key_env
                .as_deref()
                .and_then(|v| std::env::var(v).ok())
                .filter(|k| !k.is_empty())
                .map(ApiKey)
        })
    }

    pub fn http_transport(&self) -> Result<HttpTransport, ClientError> {
        HttpTransport::new(
            &self.base_url,
            self.resolve_api_key().map(|k| k.0),
            self.timeout(),
        )
    }

    /// Request fields shared by every step.
    pub fn base_request(&self) -> Map<String, Value> {
        let mut m = self.extra.clone();
        m.insert("model".into(), Value::from(self.model.clone()));
        m.insert("temperature".into(), Value::from(self.temperature));
        m.insert("max_tokens".into(), Value::from(self.max_tokens_per_step));
        m.insert("top_logprobs".into(), Value::from(self.top_logprobs));
        m
    }

    fn session(&self, max_steps: usize) -> SessionOptions {
        SessionOptions {
            max_steps,
            top_logprobs: self.top_logprobs,
            refine_prompt: self.refine_prompt.clone(),
            retry: self.retry.clone(),
            timeout: self.timeout(),
        }
    }
}

/// The live stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveGateConfig {
    pub tau: f64,
    pub k_limit: usize,
    /// Whether `H == tau` counts as confident.
    pub stop_on_tie: bool,
}

impl Default for LiveGateConfig {
    fn default() -> Self {
        Self {
            tau: f64::NAN,
            k_limit: 20,
            stop_on_tie: true,
        }
    }
}

impl LiveGateConfig {
    pub fn new(tau: f64, k_limit: usize) -> Self {
        Self {
            tau,
            k_limit,
            stop_on_tie: true,
        }
    }

    pub fn validate(&self, top_logprobs: usize) -> Result<(), ClientError> {
        if self.k_limit == 0 || self.k_limit > top_logprobs {
            return Err(ClientError::InvalidConfig(format!(
                "gate k_limit {} must be in [1, top_logprobs = {top_logprobs}]",
                self.k_limit
            )));
        }
        if self.tau.is_nan() {
            return Err(ClientError::InvalidConfig("gate tau is NaN".into()));
        }
        Ok(())
    }

    pub fn fires(&self, entropy: f64) -> bool {
        if self.stop_on_tie {
            entropy <= self.tau
        } else {
            entropy < self.tau
        }
    }
}

/// Per-session knobs independent of how the base request was obtained.
#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub max_steps: usize,
    pub top_logprobs: usize,
    pub refine_prompt: String,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

/// One completed step with the upstream bytes kept intact.
#[derive(Debug, Clone)]
pub struct SessionStep {
    pub raw: RawResponse,
    pub parsed: ParsedCompletion,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub steps: Vec<SessionStep>,
    /// Step-1 mean entropy at the gate's `k_limit`, when a gate was given.
    pub step1_entropy: Option<f64>,
    pub gated: bool,
}

/// Runs the sequential protocol: ask, optionally gate on step-1 entropy,
/// then append the previous answer and the refine prompt for each further step.
///
/// Steps are strictly serial. A retried step replaces its failed attempt.
pub async fn run_session<T: ChatTransport + ?Sized>(
    transport: &T,
    base: &Map<String, Value>,
    mut messages: Vec<Value>,
    opts: &SessionOptions,
    gate: Option<&LiveGateConfig>,
) -> Result<SessionOutcome, ClientError> {
    let mut steps: Vec<SessionStep> = Vec::with_capacity(opts.max_steps);
    let mut step1_entropy = None;
    let mut gated = false;
    for s in 1..=opts.max_steps {
        if let Some(prev) = steps.last() {
            messages.push(message("assistant", &prev.parsed.content));
            messages.push(message("user", &opts.refine_prompt));
        }
        let body = build_request(base, &messages, opts.top_logprobs);
        let raw = send_with_retry(transport, &body, &opts.retry, opts.timeout).await?;
        let json: Value = serde_json::from_slice(&raw.body)
            .map_err(|e| ClientError::MalformedResponse(format!("invalid json: {e}")))?;
        let parsed = parse_completion(&json, opts.top_logprobs)?;
        steps.push(SessionStep { raw, parsed });

        if s == 1 {
            if let Some(g) = gate {
                let h = step_entropy(&steps[0].parsed, g.k_limit)?;
                step1_entropy = Some(h);
                if g.fires(h) {
                    gated = true;
                    break;
                }
            }
        }
    }
    Ok(SessionOutcome {
        steps,
        step1_entropy,
        gated,
    })
}

/// Mean entropy of a parsed completion using at most `k` alternatives.
pub fn step_entropy(p: &ParsedCompletion, k: usize) -> Result<f64, ClientError> {
    let step = to_step(p, 1, DatasetKind::IntegerAime);
    Ok(profile_completion(&step, k)?.mean)
}

fn to_step(p: &ParsedCompletion, step_index: u32, kind: DatasetKind) -> StepTrace {
    StepTrace {
        step_index,
        completion_text: p.content.clone(),
        token_count: p.tokens.len() as u32,
        tokens: p.tokens.clone(),
        extracted_answer: extract_answer(&p.content, kind),
    }
}

/// One line of a questions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionInput {
    pub question_id: String,
    #[serde(default)]
    pub dataset: String,
    pub question: String,
    #[serde(default)]
    pub gold_answer: String,
    #[serde(default)]
    pub kind: Option<DatasetKind>,
}

impl QuestionInput {
    pub fn kind(&self) -> DatasetKind {
        self.kind.unwrap_or_else(|| DatasetKind::infer(&self.dataset))
    }
}

/// Reads a JSONL questions file, skipping blank lines.
pub fn read_questions(r: impl BufRead) -> Result<Vec<QuestionInput>, ClientError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| ClientError::Input(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| ClientError::Input(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<QuestionInput>, ClientError> {
    let f = std::fs::File::open(path.as_ref())
        .map_err(|e| ClientError::Input(format!("{}: {e}", path.as_ref().display())))?;
    read_questions(std::io::BufReader::new(f))
}

fn to_trace(q: &QuestionInput, steps: &[SessionStep]) -> QuestionTrace {
    let kind = q.kind();
    let steps: Vec<StepTrace> = steps
        .iter()
        .enumerate()
        .map(|(i, s)| to_step(&s.parsed, i as u32 + 1, kind))
        .collect();
    let step_correct = steps
        .iter()
        .map(|s| {
            !q.gold_answer.is_empty()
                && s.extracted_answer
                    .as_deref()
                    .is_some_and(|a| answers_match(a, &q.gold_answer, kind))
        })
        .collect();
    QuestionTrace {
        question_id: q.question_id.clone(),
        dataset: q.dataset.clone(),
        gold_answer: q.gold_answer.clone(),
        steps,
        step_correct,
    }
}

/// Asks one question under the sequential protocol and records the trace.
///
/// With a gate, a step-1 mean entropy at or below `tau` ends the question
/// after a single request.
pub async fn run_question<T: ChatTransport + ?Sized>(
    transport: &T,
    q: &QuestionInput,
    endpoint: &EndpointConfig,
    gate: Option<&LiveGateConfig>,
) -> Result<QuestionTrace, ClientError> {
    endpoint.validate()?;
    if let Some(g) = gate {
        g.validate(endpoint.top_logprobs)?;
    }
    let outcome = run_session(
        transport,
        &endpoint.base_request(),
        vec![message("user", &q.question)],
        &endpoint.session(endpoint.max_steps),
        gate,
    )
    .await?;
    Ok(to_trace(q, &outcome.steps))
}

/// Runs many questions with at most `concurrency` in flight.
///
/// `sink` receives each question's index and result as soon as it finishes,
/// so traces can be appended to a file without waiting for the batch.
pub async fn run_batch<T: ChatTransport + ?Sized>(
    transport: &T,
    questions: &[QuestionInput],
    endpoint: &EndpointConfig,
    gate: Option<&LiveGateConfig>,
    concurrency: usize,
    mut sink: impl FnMut(usize, Result<QuestionTrace, ClientError>),
) {
    let mut s = stream::iter(questions.iter().enumerate())
        .map(|(i, q)| async move { (i, run_question(transport, q, endpoint, gate).await) })
        .buffer_unordered(concurrency.max(1));
    while let Some((i, r)) = s.next().await {
        sink(i, r);
    }
}

/// What an uncertain question does with its extra calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetPolicy {
    /// Each further call refines the previous answer.
    SequentialRefine,
    /// Independent samples, aggregated by majority vote.
    SelfConsistency,
}

impl std::str::FromStr for BudgetPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sequential_refine" | "sequential" | "refine" => Ok(Self::SequentialRefine),
            "self_consistency" | "sc" | "vote" => Ok(Self::SelfConsistency),
            other => Err(format!("unknown budget policy '{other}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BudgetOutcome {
    pub trace: QuestionTrace,
    pub aggregate_answer: Option<String>,
    pub calls: u64,
}

#[derive(Debug, Clone)]
pub struct BudgetRun {
    /// In the order of the input questions.
    pub outcomes: Vec<BudgetOutcome>,
    pub calls_issued: u64,
}

fn check_plan(questions: &[QuestionInput], plan: &[(String, u64)]) -> Result<HashMap<String, u64>, ClientError> {
    let mut calls = HashMap::with_capacity(plan.len());
    for (id, c) in plan {
        if *c == 0 || *c as usize > MAX_STEPS {
            return Err(ClientError::PlanMismatch(format!(
                "{id}: {c} calls; each question needs between 1 and {MAX_STEPS}"
            )));
        }
        if calls.insert(id.clone(), *c).is_some() {
            return Err(ClientError::PlanMismatch(format!("{id} appears twice in the plan")));
        }
    }
    for q in questions {
        if !calls.contains_key(&q.question_id) {
            return Err(ClientError::PlanMismatch(format!("{} has no allocation", q.question_id)));
        }
    }
    if calls.len() != questions.len() {
        let known: std::collections::HashSet<&str> =
            questions.iter().map(|q| q.question_id.as_str()).collect();
        let extra = plan.iter().find(|(id, _)| !known.contains(id.as_str())).unwrap();
        return Err(ClientError::PlanMismatch(format!("{} is planned but not asked", extra.0)));
    }
    Ok(calls)
}

async fn run_planned<T: ChatTransport + ?Sized>(
    transport: &T,
    q: &QuestionInput,
    calls: u64,
    policy: BudgetPolicy,
    endpoint: &EndpointConfig,
) -> Result<BudgetOutcome, ClientError> {
    let base = endpoint.base_request();
    let opts = endpoint.session(calls as usize);
    let prompt = vec![message("user", &q.question)];
    let (steps, aggregate_answer) = match policy {
        BudgetPolicy::SequentialRefine => {
            let out = run_session(transport, &base, prompt, &opts, None).await?;
            let last = out
                .steps
                .last()
                .and_then(|s| extract_answer(&s.parsed.content, q.kind()));
            (out.steps, last)
        }
        BudgetPolicy::SelfConsistency => {
            let single = SessionOptions { max_steps: 1, ..opts };
            let mut steps = Vec::with_capacity(calls as usize);
            let mut votes = Vec::with_capacity(calls as usize);
            for _ in 0..calls {
                let mut out = run_session(transport, &base, prompt.clone(), &single, None).await?;
                let step = out.steps.remove(0);
                let h = step_entropy(&step.parsed, endpoint.top_logprobs)?;
                votes.push((extract_answer(&step.parsed.content, q.kind()), h));
                steps.push(step);
            }
            (steps, majority_vote(&votes))
        }
    };
    Ok(BudgetOutcome {
        trace: to_trace(q, &steps),
        aggregate_answer,
        calls: steps.len() as u64,
    })
}

/// Executes a budget plan: each question gets exactly its planned calls.
pub async fn run_budget<T: ChatTransport + ?Sized>(
    transport: &T,
    questions: &[QuestionInput],
    plan: &[(String, u64)],
    policy: BudgetPolicy,
    endpoint: &EndpointConfig,
    concurrency: usize,
) -> Result<BudgetRun, ClientError> {
    endpoint.validate()?;
    let calls = check_plan(questions, plan)?;
    let results: Vec<Result<BudgetOutcome, ClientError>> = stream::iter(questions)
        .map(|q| run_planned(transport, q, calls[&q.question_id], policy, endpoint))
        .buffered(concurrency.max(1))
        .collect()
        .await;
    let outcomes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let calls_issued = outcomes.iter().map(|o| o.calls).sum();
    Ok(BudgetRun {
        outcomes,
        calls_issued,
    })
}
