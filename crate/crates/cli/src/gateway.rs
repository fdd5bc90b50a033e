//! HTTP gating proxy in front of an OpenAI-compatible upstream.
//!
//! Step 1 of every chat completion is forwarded with logprobs forced on. If
//! its mean entropy is at or below the current threshold the step-1 response
//! is returned as is; otherwise the gateway runs the refinement turns and
//! returns the final one. Gating metadata travels in `x-entgate-*` headers so
//! response bodies stay compatible with existing clients.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use entgate_core::client::{
    build_request, run_session, send_with_retry, ClientError, EndpointConfig, HttpTransport, LiveGateConfig,
    SessionOptions,
};
use entgate_core::threshold::CalibrationRecord;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use tokio::net::TcpListener;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub upstream: EndpointConfig,
    /// A NaN (or absent) `tau` with no calibration file means pass-through.
    pub gate: LiveGateConfig,
    pub metrics_enabled: bool,
    /// Takes precedence over `gate.tau` and is re-read when it changes.
    pub calibration_file: Option<PathBuf>,
    pub reload_interval_ms: u64,
    pub probe_upstream: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: ([127, 0, 0, 1], 8088).into(),
            upstream: EndpointConfig::default(),
            gate: LiveGateConfig::default(),
            metrics_enabled: true,
            calibration_file: None,
            reload_interval_ms: 2000,
            probe_upstream: true,
        }
    }
}

impl GatewayConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("Config", format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::new("Config", format!("{}: {e}", path.display())))
    }
}

/// The threshold every request reads once and keeps to the end.
#[derive(Debug, Clone)]
pub struct GateSnapshot {
    /// `None` means pass-through.
    pub gate: Option<LiveGateConfig>,
    pub source: String,
}

#[derive(Debug, Default)]
pub struct Metrics {
    pub requests: AtomicU64,
    pub gated: AtomicU64,
    pub continued: AtomicU64,
    pub passthrough: AtomicU64,
    pub upstream_steps: AtomicU64,
    pub upstream_errors: AtomicU64,
    pub bad_requests: AtomicU64,
    pub tokens_saved_estimate: AtomicU64,
    pub reloads: AtomicU64,
    pub reload_failures: AtomicU64,
}

impl Metrics {
    /// Gated share of requests that went through the gate.
    pub fn stop_rate(&self) -> f64 {
        let g = self.gated.load(Ordering::Relaxed);
        let c = self.continued.load(Ordering::Relaxed);
        if g + c == 0 {
            0.0
        } else {
            g as f64 / (g + c) as f64
        }
    }

    fn render(&self, snap: &GateSnapshot) -> String {
        let n = |a: &AtomicU64| a.load(Ordering::Relaxed);
        let tau = snap.gate.map_or("none".to_string(), |g| g.tau.to_string());
        format!(
            "requests_total {}\nrequests_gated {}\nrequests_continued {}\nrequests_passthrough {}\n\
             stop_rate {}\ntokens_saved_estimate {}\nupstream_steps_total {}\nupstream_errors_total {}\n\
             bad_requests_total {}\ntau {}\ngating_enabled {}\ncalibration_reloads_total {}\n\
             calibration_reload_failures_total {}\n",
            n(&self.requests),
            n(&self.gated),
            n(&self.continued),
            n(&self.passthrough),
            self.stop_rate(),
            n(&self.tokens_saved_estimate),
            n(&self.upstream_steps),
            n(&self.upstream_errors),
            n(&self.bad_requests),
            tau,
            u8::from(snap.gate.is_some()),
            n(&self.reloads),
            n(&self.reload_failures),
        )
    }
}

pub struct AppState {
    config: GatewayConfig,
    upstream: HttpTransport,
    gate: RwLock<Arc<GateSnapshot>>,
    calibration_mtime: RwLock<Option<SystemTime>>,
    pub metrics: Metrics,
}

impl AppState {
    pub fn new(config: GatewayConfig) -> Result<Self, CliError> {
        config.upstream.validate()?;
        let upstream = config.upstream.http_transport()?;
        let state = Self {
            gate: RwLock::new(Arc::new(GateSnapshot { gate: None, source: "unset".into() })),
            calibration_mtime: RwLock::new(None),
            upstream,
            metrics: Metrics::default(),
            config,
        };
        let initial = match &state.config.calibration_file {
            Some(path) => match state.load_calibration() {
                Ok(snap) => snap,
                Err(e) => {
                    tracing::warn!(path = %path.display(), error = %e, "calibration file unreadable; using configured tau");
                    state.configured_snapshot()?
                }
            },
            None => state.configured_snapshot()?,
        };
        if initial.gate.is_none() {
            tracing::warn!("no finite threshold configured; gateway runs in pass-through mode");
        }
        *state.gate.write().unwrap() = Arc::new(initial);
        Ok(state)
    }

    fn configured_snapshot(&self) -> Result<GateSnapshot, CliError> {
        let g = self.config.gate;
        if g.tau.is_nan() {
            return Ok(GateSnapshot { gate: None, source: "config".into() });
        }
        g.validate(self.config.upstream.top_logprobs)?;
        Ok(GateSnapshot { gate: Some(g), source: "config".into() })
    }

    fn load_calibration(&self) -> Result<GateSnapshot, CliError> {
        let path = self.config.calibration_file.as_ref().expect("checked by caller");
        let mtime = std::fs::metadata(path).and_then(|m| m.modified()).ok();
        let rec = CalibrationRecord::load(path)?;
        let gate = LiveGateConfig { tau: rec.tau, ..self.config.gate };
        gate.validate(self.config.upstream.top_logprobs)?;
        *self.calibration_mtime.write().unwrap() = mtime;
        Ok(GateSnapshot {
            gate: Some(gate),
            source: format!("{} ({})", path.display(), rec.method),
        })
    }

    /// Re-reads the calibration file if its modification time changed.
    /// Returns whether a new threshold was installed.
    pub fn reload_if_changed(&self) -> bool {
        let Some(path) = &self.config.calibration_file else {
            return false;
        };
        let mtime = std::fs::metadata(path).and_then(|m| m.modified()).ok();
        if mtime.is_none() || mtime == *self.calibration_mtime.read().unwrap() {
            return false;
        }
        self.force_reload()
    }

    /// Re-reads the calibration file unconditionally. A bad file leaves the
    /// current threshold in place.
    pub fn force_reload(&self) -> bool {
        match self.load_calibration() {
            Ok(snap) => {
                tracing::info!(tau = ?snap.gate.map(|g| g.tau), source = %snap.source, "threshold reloaded");
                *self.gate.write().unwrap() = Arc::new(snap);
                self.metrics.reloads.fetch_add(1, Ordering::Relaxed);
                true
            }
            Err(e) => {
                tracing::warn!(error = %e, "calibration reload failed; keeping current threshold");
                self.metrics.reload_failures.fetch_add(1, Ordering::Relaxed);
                false
            }
        }
    }

    pub fn snapshot(&self) -> Arc<GateSnapshot> {
        self.gate.read().unwrap().clone()
    }

    /// Replaces the threshold directly (used by operators' tooling and tests).
    pub fn set_tau(&self, tau: Option<f64>) {
        let gate = tau.map(|tau| LiveGateConfig { tau, ..self.config.gate });
        *self.gate.write().unwrap() = Arc::new(GateSnapshot { gate, source: "manual".into() });
    }
}

/// Path the upstream serves chat completions on, e.g. `/v1/chat/completions`.
pub fn chat_path(base_url: &str) -> String {
    let rest = base_url.split_once("://").map_or(base_url, |(_, r)| r);
    let path = rest.find('/').map_or("", |i| &rest[i..]).trim_end_matches('/');
    format!("{path}/chat/completions")
}

pub fn router(state: Arc<AppState>) -> Router {
    let path = chat_path(&state.config.upstream.base_url);
    let mut r = Router::new()
        .route(&path, post(chat))
        .route("/healthz", get(|| async { "ok" }));
    if path != "/v1/chat/completions" {
        r = r.route("/v1/chat/completions", post(chat));
    }
    if state.config.metrics_enabled {
        r = r.route("/metrics", get(metrics));
    }
    r.with_state(state)
}

async fn metrics(State(st): State<Arc<AppState>>) -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
        st.metrics.render(&st.snapshot()),
    )
}

fn error_body(status: StatusCode, kind: &str, message: &str) -> Response {
    let body = json!({ "error": { "message": message, "type": kind } });
    (status, axum::Json(body)).into_response()
}

fn header_pair(name: &'static str, value: String) -> (HeaderName, HeaderValue) {
    (
        HeaderName::from_static(name),
        HeaderValue::from_str(&value).unwrap_or_else(|_| HeaderValue::from_static("invalid")),
    )
}

fn raw_response(status: u16, body: Vec<u8>, extra: Vec<(HeaderName, HeaderValue)>) -> Response {
    let status = StatusCode::from_u16(status).unwrap_or(StatusCode::BAD_GATEWAY);
    let mut resp = (status, body).into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    for (k, v) in extra {
        h.insert(k, v);
    }
    resp
}

fn upstream_failure(st: &AppState, e: ClientError) -> Response {
    st.metrics.upstream_errors.fetch_add(1, Ordering::Relaxed);
    match e {
        // The upstream rejected the request itself; let the client see why.
        ClientError::ProviderError { status, body } if status < 500 && status != 429 => {
            raw_response(status, body.into_bytes(), vec![])
        }
        other => {
            tracing::warn!(error = %other, "upstream failure");
            error_body(StatusCode::BAD_GATEWAY, "upstream_error", &other.to_string())
        }
    }
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(|k| k.trim().to_string())
}

async fn chat(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    st.metrics.requests.fetch_add(1, Ordering::Relaxed);
    let bad = |msg: &str| {
        st.metrics.bad_requests.fetch_add(1, Ordering::Relaxed);
        error_body(StatusCode::BAD_REQUEST, "invalid_request_error", msg)
    };
    let mut obj: Map<String, Value> = match serde_json::from_slice(&body) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return bad("request body must be a JSON object"),
        Err(e) => return bad(&format!("invalid JSON: {e}")),
    };
    let messages = match obj.remove("messages") {
        Some(Value::Array(m)) if !m.is_empty() => m,
        _ => return bad("`messages` must be a non-empty array"),
    };
    if obj.get("stream").and_then(Value::as_bool) == Some(true) {
        return bad("streaming responses are not supported by the gating proxy");
    }
    let up = &st.config.upstream;
    let transport = match bearer(&headers) {
        Some(key) => st.upstream.with_api_key(Some(key)),
        None => st.upstream.clone(),
    };
    // One snapshot per request: a concurrent reload cannot change tau mid-flight.
    let snap = st.snapshot();

    let Some(gate) = snap.gate else {
        st.metrics.passthrough.fetch_add(1, Ordering::Relaxed);
        let req = build_request(&obj, &messages, st.config.gate.k_limit);
        return match send_with_retry(&transport, &req, &up.retry, up.timeout()).await {
            Ok(raw) => {
                st.metrics.upstream_steps.fetch_add(1, Ordering::Relaxed);
                raw_response(raw.status, raw.body, vec![header_pair("x-entgate-mode", "passthrough".into())])
            }
            Err(e) => upstream_failure(&st, e),
        };
    };

    obj.entry("model").or_insert_with(|| Value::from(up.model.clone()));
    obj.entry("temperature").or_insert_with(|| Value::from(up.temperature));
    obj.entry("max_tokens").or_insert_with(|| Value::from(up.max_tokens_per_step));
    for (k, v) in &up.extra {
        obj.entry(k.clone()).or_insert_with(|| v.clone());
    }
    let requested_k = obj.get("top_logprobs").and_then(Value::as_u64).unwrap_or(0) as usize;
    let opts = SessionOptions {
        max_steps: up.max_steps,
        top_logprobs: requested_k.max(gate.k_limit).min(entgate_core::entropy::MAX_TOP_K),
        refine_prompt: up.refine_prompt.clone(),
        retry: up.retry.clone(),
        timeout: up.timeout(),
    };
    let outcome = match run_session(&transport, &obj, messages, &opts, Some(&gate)).await {
        Ok(o) => o,
        Err(e) => return upstream_failure(&st, e),
    };
    let steps = outcome.steps.len();
    st.metrics.upstream_steps.fetch_add(steps as u64, Ordering::Relaxed);
    if outcome.gated {
        st.metrics.gated.fetch_add(1, Ordering::Relaxed);
        let step1 = outcome.steps[0].parsed.tokens.len() as u64;
        st.metrics
            .tokens_saved_estimate
            .fetch_add(step1 * (up.max_steps as u64 - 1), Ordering::Relaxed);
    } else {
        st.metrics.continued.fetch_add(1, Ordering::Relaxed);
    }
    let h = outcome.step1_entropy.unwrap_or(f64::NAN);
    let last = outcome.steps.into_iter().last().expect("at least one step");
    raw_response(
        last.raw.status,
        last.raw.body,
        vec![
            header_pair("x-entgate-mode", "gating".into()),
            header_pair("x-entgate-entropy", format!("{h:.6}")),
            header_pair("x-entgate-tau", gate.tau.to_string()),
            header_pair("x-entgate-gated", outcome.gated.to_string()),
            header_pair("x-entgate-steps", steps.to_string()),
        ],
    )
}

/// A bound but not yet serving gateway.
pub struct Gateway {
    listener: TcpListener,
    state: Arc<AppState>,
}

impl Gateway {
    pub async fn bind(config: GatewayConfig) -> Result<Self, CliError> {
        let state = Arc::new(AppState::new(config)?);
        if state.config.probe_upstream {
            let status = state.upstream.probe().await.map_err(|e| {
                CliError::new("UpstreamUnreachable", format!("{}: {e}", state.config.upstream.base_url))
            })?;
            tracing::info!(status, "upstream probe answered");
        }
        let listener = TcpListener::bind(state.config.listen).await?;
        Ok(Self { listener, state })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn state(&self) -> Arc<AppState> {
        self.state.clone()
    }

    /// Serves until `shutdown` resolves, polling the calibration file meanwhile.
    pub async fn run(self, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> Result<(), CliError> {
        let reloader = self.state.config.calibration_file.is_some().then(|| {
            let st = self.state.clone();
            let every = Duration::from_millis(st.config.reload_interval_ms.max(50));
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(every);
                loop {
                    tick.tick().await;
                    st.reload_if_changed();
                }
            })
        });
        tracing::info!(addr = %self.local_addr(), "gateway listening");
        let result = axum::serve(self.listener, router(self.state.clone()))
            .with_graceful_shutdown(shutdown)
            .await;
        if let Some(r) = reloader {
            r.abort();
        }
        result.map_err(CliError::from)
    }
}

pub async fn serve(config: GatewayConfig) -> Result<(), CliError> {
    let gw = Gateway::bind(config).await?;
    gw.run(async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
