//! Multi-step reasoning traces: data model, line-delimited file format, and
//! ingestion with validation.
//!
//! A trace file is JSON Lines. The first non-blank line is a header record
//! carrying `schema_version`, `model_name`, `k_logprobs` and `temperature`;
//! every following line is one [`QuestionTrace`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{TokenLogprobs, MAX_TOP_K};

pub const SCHEMA_VERSION: u32 = 1;
/// Longest refinement chain a trace may record.
pub const MAX_STEPS: usize = 10;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("question {question_id}: {detail}")]
    InvariantViolation { question_id: String, detail: String },
}

/// One reasoning step's completion record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step_index: u32,
    pub completion_text: String,
    pub token_count: u32,
    /// One entry per emitted token; empty when logprobs were not recorded.
    #[serde(default)]
    pub tokens: Vec<TokenLogprobs>,
    #[serde(default)]
    pub extracted_answer: Option<String>,
}

impl StepTrace {
    pub fn has_logprobs(&self) -> bool {
        !self.tokens.is_empty()
    }
}

/// A question's full multi-step record with per-step correctness labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTrace {
    pub question_id: String,
    pub dataset: String,
    pub gold_answer: String,
    pub steps: Vec<StepTrace>,
    pub step_correct: Vec<bool>,
}

impl QuestionTrace {
    pub fn step1(&self) -> Option<&StepTrace> {
        self.steps.first()
    }

    pub fn step1_correct(&self) -> bool {
        self.step_correct.first().copied().unwrap_or(false)
    }

    /// Correctness after the last recorded step: the full-reasoning baseline.
    pub fn final_correct(&self) -> bool {
        self.step_correct.last().copied().unwrap_or(false)
    }

    pub fn total_tokens(&self) -> u64 {
        self.steps.iter().map(|s| u64::from(s.token_count)).sum()
    }

    pub fn validate(&self, k_logprobs: usize) -> Result<(), TraceError> {
        let violation = |detail: String| TraceError::InvariantViolation {
            question_id: self.question_id.clone(),
            detail,
        };
        if self.steps.is_empty() {
            return Err(violation("no steps recorded".into()));
        }
        if self.steps.len() > MAX_STEPS {
            return Err(violation(format!(
                "{} steps recorded; at most {MAX_STEPS} supported",
                self.steps.len()
            )));
        }
        if self.step_correct.len() != self.steps.len() {
            return Err(violation(format!(
                "step_correct has {} labels for {} steps",
                self.step_correct.len(),
                self.steps.len()
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            let expected = i as u32 + 1;
            if step.step_index != expected {
                return Err(violation(format!(
                    "step indices not contiguous: found {} at position {expected}",
                    step.step_index
                )));
            }
            if step.token_count == 0 {
                return Err(violation(format!("step {expected} has token_count 0")));
            }
            if step.has_logprobs() && step.tokens.len() != step.token_count as usize {
                return Err(violation(format!(
                    "step {expected}: token_count {} but {} logprob rows",
                    step.token_count,
                    step.tokens.len()
                )));
            }
            if let Some(t) = step.tokens.iter().position(|t| t.k() > k_logprobs) {
                return Err(violation(format!(
                    "step {expected} token {t}: {} alternatives exceed declared k_logprobs {k_logprobs}",
                    step.tokens[t].k()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub model_name: String,
    pub k_logprobs: usize,
    pub temperature: f64,
}

/// A model's recorded traces over a question set.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub model_name: String,
    pub k_logprobs: usize,
    pub temperature: f64,
    pub questions: Vec<QuestionTrace>,
}

impl TraceSet {
    pub fn new(model_name: impl Into<String>, k_logprobs: usize, temperature: f64) -> Self {
        Self {
            model_name: model_name.into(),
            k_logprobs,
            temperature,
            questions: Vec::new(),
        }
    }

    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            schema_version: SCHEMA_VERSION,
            model_name: self.model_name.clone(),
            k_logprobs: self.k_logprobs,
            temperature: self.temperature,
        }
    }

    /// Single dataset name if every question shares one, else `"mixed"`.
    pub fn dataset_label(&self) -> String {
        match self.questions.first() {
            None => String::new(),
            Some(first) if self.questions.iter().all(|q| q.dataset == first.dataset) => {
                first.dataset.clone()
            }
            Some(_) => "mixed".into(),
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        validate_header_fields(self.k_logprobs, self.temperature).map_err(|message| {
            TraceError::ParseError { line: 1, message }
        })?;
        self.questions
            .iter()
            .try_for_each(|q| q.validate(self.k_logprobs))
    }
}

fn validate_header_fields(k: usize, temperature: f64) -> Result<(), String> {
    if !(1..=MAX_TOP_K).contains(&k) {
        return Err(format!("k_logprobs {k} outside [1, {MAX_TOP_K}]"));
    }
    if !temperature.is_finite() || temperature < 0.0 {
        return Err(format!("invalid temperature {temperature}"));
    }
    Ok(())
}

/// Streams and validates a trace file.
pub fn load_traces(path: impl AsRef<Path>) -> Result<TraceSet, TraceError> {
    read_traces(BufReader::new(File::open(path)?))
}

pub fn read_traces(reader: impl BufRead) -> Result<TraceSet, TraceError> {
    let mut set: Option<TraceSet> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| TraceError::ParseError {
            line: line_no,
            message: e.to_string(),
        };
        match set.as_mut() {
            None => {
                let header: TraceHeader = serde_json::from_str(&line).map_err(parse_err)?;
                if header.schema_version != SCHEMA_VERSION {
                    return Err(TraceError::ParseError {
                        line: line_no,
                        message: format!(
                            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                            header.schema_version
                        ),
                    });
                }
                validate_header_fields(header.k_logprobs, header.temperature).map_err(
                    |message| TraceError::ParseError {
                        line: line_no,
                        message,
                    },
                )?;
                set = Some(TraceSet::new(
                    header.model_name,
                    header.k_logprobs,
                    header.temperature,
                ));
            }
            Some(set) => {
                let q: QuestionTrace = serde_json::from_str(&line).map_err(parse_err)?;
                q.validate(set.k_logprobs)?;
                set.questions.push(q);
            }
        }
    }
    set.ok_or(TraceError::ParseError {
        line: 0,
        message: "missing header record".into(),
    })
}

pub fn save_traces(set: &TraceSet, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_traces(set, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_traces(set: &TraceSet, mut w: impl Write) -> Result<(), TraceError> {
    write_json_line(&mut w, &set.header())?;
    for q in &set.questions {
        write_json_line(&mut w, q)?;
    }
    Ok(())
}

fn write_json_line(w: &mut impl Write, value: &impl Serialize) -> Result<(), TraceError> {
    serde_json::to_writer(&mut *w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Append-only trace writer: header once, then one flushed line per question.
pub struct TraceWriter<W: Write> {
    inner: W,
    k_logprobs: usize,
}

impl TraceWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: &TraceHeader) -> Result<Self, TraceError> {
        Self::new(BufWriter::new(File::create(path)?), header)
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut inner: W, header: &TraceHeader) -> Result<Self, TraceError> {
        write_json_line(&mut inner, header)?;
        inner.flush()?;
        Ok(Self {
            inner,
            k_logprobs: header.k_logprobs,
        })
    }

    pub fn append(&mut self, q: &QuestionTrace) -> Result<(), TraceError> {
        q.validate(self.k_logprobs)?;
        write_json_line(&mut self.inner, q)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}
