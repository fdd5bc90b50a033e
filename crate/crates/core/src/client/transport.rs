//! Sending request bodies to an endpoint, with retries.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ClientError;

/// Status and raw body of one upstream response.
#[derive(Debug, Clone)]
pub struct RawResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

impl RawResponse {
    pub fn json(status: u16, body: &Value) -> Self {
        Self {
            status,
            body: serde_json::to_vec(body).expect("json values serialize"),
        }
    }
}

/// Failure below the HTTP status layer.
#[derive(Debug, Clone)]
pub enum TransportFailure {
    Timeout,
    Connection(String),
}

/// Anything that can post a chat-completion body and return the raw reply.
#[async_trait]
pub trait ChatTransport: Send + Sync {
    async fn post_chat(&self, body: &Value) -> Result<RawResponse, TransportFailure>;
}

#[async_trait]
impl<T: ChatTransport + ?Sized> ChatTransport for std::sync::Arc<T> {
    async fn post_chat(&self, body: &Value) -> Result<RawResponse, TransportFailure> {
        (**self).post_chat(body).await
    }
}

/// HTTP transport posting to `{base_url}/chat/completions`.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    client: reqwest::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, ClientError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::InvalidConfig(format!("http client: {e}")))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Same connection pool, different credentials.
    pub fn with_api_key(&self, api_key: Option<String>) -> Self {
        Self {
            client: self.client.clone(),
            url: self.url.clone(),
            api_key,
        }
    }

    /// Checks that the upstream answers HTTP at all by fetching `{base}/models`.
    /// Any status counts as reachable.
    pub async fn probe(&self) -> Result<u16, ClientError> {
        let url = self.url.trim_end_matches("/chat/completions").to_string() + "/models";
        let mut req = self.client.get(url);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        match req.send().await {
            Ok(resp) => Ok(resp.status().as_u16()),
            Err(e) if e.is_timeout() => Err(ClientError::Timeout),
            Err(e) => Err(ClientError::RetriesExhausted { attempts: 1, last: e.to_string() }),
        }
    }
}

#[async_trait]
impl ChatTransport for HttpTransport {
    async fn post_chat(&self, body: &Value) -> Result<RawResponse, TransportFailure> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(classify)?;
        let status = resp.status().as_u16();
        let body = resp.bytes().await.map_err(classify)?.to_vec();
        Ok(RawResponse { status, body })
    }
}

fn classify(e: reqwest::Error) -> TransportFailure {
    if e.is_timeout() {
        TransportFailure::Timeout
    } else {
        TransportFailure::Connection(e.to_string())
    }
}

/// Retry budget for one logical request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further attempt.
    pub backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

/// Posts `body`, re-issuing it on 429, 5xx, timeouts and connection errors.
///
/// Returns the first successful response. Other 4xx statuses fail at once.
pub async fn send_with_retry<T: ChatTransport + ?Sized>(
    transport: &T,
    body: &Value,
    retry: &RetryPolicy,
    timeout: Duration,
) -> Result<RawResponse, ClientError> {
    let mut last = String::new();
    let mut timed_out = false;
    for attempt in 0..=retry.max_retries {
        if attempt > 0 {
            tokio::time::sleep(retry.delay(attempt - 1)).await;
        }
        let outcome = match tokio::time::timeout(timeout, transport.post_chat(body)).await {
            Err(_) => Err(TransportFailure::Timeout),
            Ok(r) => r,
        };
        match outcome {
            Ok(resp) if (200..300).contains(&resp.status) => return Ok(resp),
            Ok(resp) if retryable(resp.status) => {
                timed_out = false;
                last = format!("status {}: {}", resp.status, String::from_utf8_lossy(&resp.body));
                tracing::warn!(status = resp.status, attempt, "retryable upstream status");
            }
            Ok(resp) => {
                return Err(ClientError::ProviderError {
                    status: resp.status,
                    body: String::from_utf8_lossy(&resp.body).into_owned(),
                })
            }
            Err(TransportFailure::Timeout) => {
                timed_out = true;
                last = "timeout".into();
                tracing::warn!(attempt, "upstream timeout");
            }
            Err(TransportFailure::Connection(e)) => {
                timed_out = false;
                tracing::warn!(attempt, error = %e, "upstream connection failure");
                last = e;
            }
        }
    }
    if timed_out {
        Err(ClientError::Timeout)
    } else {
        Err(ClientError::RetriesExhausted {
            attempts: retry.max_retries + 1,
            last,
        })
    }
}
