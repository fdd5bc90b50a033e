//! Wire format of OpenAI-compatible chat completions.

use serde_json::{json, Map, Value};

use super::ClientError;
use crate::entropy::{TokenLogprobs, TopLogprob, MAX_TOP_K};

/// Text and per-token alternatives parsed from one completion response.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCompletion {
    pub content: String,
    pub tokens: Vec<TokenLogprobs>,
    pub finish_reason: Option<String>,
}

/// A chat message as sent on the wire.
pub fn message(role: &str, content: &str) -> Value {
    json!({ "role": role, "content": content })
}

/// Builds a request body from shared fields and a message list.
///
/// `logprobs` is always forced on, and `top_logprobs` is raised to `k` if the
/// base asks for fewer.
pub fn build_request(base: &Map<String, Value>, messages: &[Value], k: usize) -> Value {
    let mut body = base.clone();
    body.insert("messages".into(), Value::Array(messages.to_vec()));
    body.insert("logprobs".into(), Value::Bool(true));
    let requested = body
        .get("top_logprobs")
        .and_then(Value::as_u64)
        .unwrap_or(0) as usize;
    body.insert("top_logprobs".into(), json!(requested.max(k).min(MAX_TOP_K)));
    Value::Object(body)
}

fn parse_alternative(v: &Value) -> Option<TopLogprob> {
    let logprob = v.get("logprob")?.as_f64()?;
    let token = v.get("token").and_then(Value::as_str).unwrap_or_default();
    Some(TopLogprob {
        token: token.to_string(),
        logprob,
    })
}

/// Parses `choices[0]` of a completion response.
///
/// Each row of `logprobs.content` becomes one token; rows whose
/// `top_logprobs` is empty fall back to the sampled token alone. A response
/// without that shape, or with no alternatives anywhere, is reported as
/// [`ClientError::LogprobsUnsupported`].
pub fn parse_completion(body: &Value, max_k: usize) -> Result<ParsedCompletion, ClientError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| ClientError::MalformedResponse("response has no choices".into()))?;
    let content = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish_reason = choice
        .get("finish_reason")
        .and_then(Value::as_str)
        .map(str::to_string);
    let rows = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .ok_or(ClientError::LogprobsUnsupported)?;
    if rows.is_empty() {
        return Err(if content.is_empty() {
            ClientError::MalformedResponse("empty completion".into())
        } else {
            ClientError::LogprobsUnsupported
        });
    }

    let keep = max_k.clamp(1, MAX_TOP_K);
    let mut any_topk = false;
    let mut tokens = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let mut alts: Vec<TopLogprob> = row
            .get("top_logprobs")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(parse_alternative).collect())
            .unwrap_or_default();
        if alts.is_empty() {
            alts.extend(parse_alternative(row));
        } else {
            any_topk = true;
        }
        if alts.is_empty() {
            return Err(ClientError::MalformedResponse(format!(
                "logprob row {i} has no usable entries"
            )));
        }
        alts.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        alts.truncate(keep);
        tokens.push(TokenLogprobs::new(alts).map_err(|e| {
            ClientError::MalformedResponse(format!("logprob row {i}: {e}"))
        })?);
    }
    if !any_topk {
        return Err(ClientError::LogprobsUnsupported);
    }
    Ok(ParsedCompletion {
        content,
        tokens,
        finish_reason,
    })
}
