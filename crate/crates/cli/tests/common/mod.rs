//! A stub OpenAI-compatible upstream and a gateway wired to it.

#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::Router;
use entgate_cli::gateway::{AppState, Gateway, GatewayConfig};
use entgate_core::client::testing::{completion_body, peaked_rows, uniform_rows};
use entgate_core::client::{EndpointConfig, LiveGateConfig, RetryPolicy};
use serde_json::Value;

#[derive(Default)]
pub struct Upstream {
    pub calls: AtomicUsize,
    pub bodies: Mutex<Vec<Value>>,
}

impl Upstream {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Prompts containing "hard" get uniform-over-20 tokens (4.32 bits);
/// everything else gets near-zero entropy. The body has irregular
/// whitespace so byte-transparency is observable.
pub fn stub_reply(body: &Value) -> Vec<u8> {
    let first = body["messages"][0]["content"].as_str().unwrap_or_default();
    let rows = if first.contains("hard") { uniform_rows(5, 20) } else { peaked_rows(5, 20) };
    let v = completion_body("The answer is 7.", &rows);
    format!("{{ \"stub\" : true ,\n \"choices\":{} }}", v["choices"]).into_bytes()
}

async fn chat(State(up): State<Arc<Upstream>>, body: Bytes) -> impl IntoResponse {
    up.calls.fetch_add(1, Ordering::SeqCst);
    let Ok(v) = serde_json::from_slice::<Value>(&body) else {
        return (StatusCode::BAD_REQUEST, b"bad json".to_vec());
    };
    up.bodies.lock().unwrap().push(v.clone());
    if v["messages"][0]["content"].as_str() == Some("reject me") {
        return (StatusCode::UNPROCESSABLE_ENTITY, b"{\"error\":\"nope\"}".to_vec());
    }
    (StatusCode::OK, stub_reply(&v))
}

pub async fn spawn_upstream() -> (SocketAddr, Arc<Upstream>) {
    let up = Arc::new(Upstream::default());
    let app = Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/models", get(|| async { "{\"data\":[]}" }))
        .with_state(up.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (addr, up)
}

pub fn gateway_config(upstream: SocketAddr, tau: f64) -> GatewayConfig {
    GatewayConfig {
        listen: ([127, 0, 0, 1], 0).into(),
        upstream: EndpointConfig {
            base_url: format!("http://{upstream}/v1"),
            model: "stub".into(),
            api_key_env: None,
            retry: RetryPolicy { max_retries: 1, backoff_ms: 1, max_backoff_ms: 1 },
            request_timeout_secs: 5,
            ..Default::default()
        },
        gate: LiveGateConfig { tau, ..LiveGateConfig::new(tau, 20) },
        probe_upstream: true,
        ..Default::default()
    }
}

/// Starts a gateway; returns its base URL and shared state.
pub async fn spawn_gateway(cfg: GatewayConfig) -> (String, Arc<AppState>) {
    let gw = Gateway::bind(cfg).await.unwrap();
    let addr = gw.local_addr();
    let state = gw.state();
    tokio::spawn(gw.run(std::future::pending()));
    (format!("http://{addr}"), state)
}

pub fn chat_request(prompt: &str) -> Value {
    serde_json::json!({ "model": "stub", "messages": [{ "role": "user", "content": prompt }] })
}
