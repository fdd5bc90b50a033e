//! Scripted in-process transports for tests and examples.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use serde_json::{json, Value};

use super::transport::{ChatTransport, RawResponse, TransportFailure};

type Responder = dyn Fn(&Value, usize) -> Result<RawResponse, TransportFailure> + Send + Sync;

/// A transport that answers from a closure and records every request.
pub struct ScriptedTransport {
    responder: Box<Responder>,
    calls: AtomicUsize,
    requests: Mutex<Vec<Value>>,
}

impl ScriptedTransport {
    /// `f(body, call_index)` produces the reply to each request.
    pub fn new(
        f: impl Fn(&Value, usize) -> Result<RawResponse, TransportFailure> + Send + Sync + 'static,
    ) -> Self {
        Self {
            responder: Box::new(f),
            calls: AtomicUsize::new(0),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Always replies 200 with the same completion.
    pub fn constant(body: Value) -> Self {
        Self::new(move |_, _| Ok(RawResponse::json(200, &body)))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<Value> {
        self.requests.lock().unwrap().clone()
    }
}

#[async_trait]
impl ChatTransport for ScriptedTransport {
    async fn post_chat(&self, body: &Value) -> Result<RawResponse, TransportFailure> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        self.requests.lock().unwrap().push(body.clone());
        (self.responder)(body, n)
    }
}

/// A completion body with one logprob row per entry of `rows`.
pub fn completion_body(content: &str, rows: &[Vec<f64>]) -> Value {
    let content_rows: Vec<Value> = rows
        .iter()
        .enumerate()
        .map(|(i, alts)| {
            let top: Vec<Value> = alts
                .iter()
                .enumerate()
                .map(|(j, lp)| json!({"token": format!("t{i}_{j}"), "logprob": lp}))
                .collect();
            json!({"token": format!("t{i}_0"), "logprob": alts.first().copied().unwrap_or(0.0), "top_logprobs": top})
        })
        .collect();
    json!({
        "id": "chatcmpl-stub",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "logprobs": {"content": content_rows},
            "finish_reason": "stop"
        }],
        "usage": {"completion_tokens": rows.len()}
    })
}

/// `n` tokens whose `k` alternatives are equally likely (entropy `log2 k`).
pub fn uniform_rows(n: usize, k: usize) -> Vec<Vec<f64>> {
    vec![vec![-(k as f64).ln(); k]; n]
}

/// `n` tokens with a single dominant alternative among `k`.
pub fn peaked_rows(n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut row = vec![-20.0; k];
    row[0] = 0.0;
    vec![row; n]
}
