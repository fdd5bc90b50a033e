mod common;

use std::collections::HashMap;

use common::*;
use entgate_core::threshold::CalibrationRecord;
use entgate_core::ThresholdMethod;

async fn post(client: &reqwest::Client, base: &str, body: &serde_json::Value) -> reqwest::Response {
    client.post(format!("{base}/v1/chat/completions")).json(body).send().await.unwrap()
}

async fn metrics(client: &reqwest::Client, base: &str) -> HashMap<String, String> {
    let text = client.get(format!("{base}/metrics")).send().await.unwrap().text().await.unwrap();
    text.lines()
        .filter_map(|l| l.split_once(' '))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[tokio::test]
async fn infinite_tau_serves_every_request_after_one_call() {
    let (up_addr, up) = spawn_upstream().await;
    let (base, _) = spawn_gateway(gateway_config(up_addr, f64::INFINITY)).await;
    let c = reqwest::Client::new();
    for i in 0..5 {
        let prompt = if i % 2 == 0 { "hard one" } else { "easy one" };
        let r = post(&c, &base, &chat_request(prompt)).await;
        assert_eq!(r.status(), 200);
        assert_eq!(r.headers()["x-entgate-gated"], "true");
        assert_eq!(r.headers()["x-entgate-steps"], "1");
        assert_eq!(r.headers()["x-entgate-tau"], "inf");
    }
    assert_eq!(up.calls(), 5);
    let m = metrics(&c, &base).await;
    assert_eq!(m["stop_rate"], "1");
    assert_eq!(m["requests_gated"], "5");
    // 5 requests x 5 step-1 tokens x 3 skipped steps.
    assert_eq!(m["tokens_saved_estimate"], "75");
}

#[tokio::test]
async fn uncertain_requests_get_refinement_turns() {
    let (up_addr, up) = spawn_upstream().await;
    let (base, _) = spawn_gateway(gateway_config(up_addr, 4.0)).await;
    let c = reqwest::Client::new();
    let r = post(&c, &base, &chat_request("hard one")).await;
    assert_eq!(r.status(), 200);
    assert_eq!(r.headers()["x-entgate-gated"], "false");
    assert_eq!(r.headers()["x-entgate-steps"], "4");
    let h: f64 = r.headers()["x-entgate-entropy"].to_str().unwrap().parse().unwrap();
    assert!((h - 20f64.log2()).abs() < 1e-6);
    assert_eq!(up.calls(), 4);
    let bodies = up.bodies.lock().unwrap().clone();
    assert!(bodies.iter().all(|b| b["logprobs"] == true && b["top_logprobs"] == 20));
    assert_eq!(bodies[3]["messages"].as_array().unwrap().len(), 7);
}

#[tokio::test]
async fn pass_through_is_body_transparent() {
    let (up_addr, up) = spawn_upstream().await;
    let (base, state) = spawn_gateway(gateway_config(up_addr, f64::NAN)).await;
    assert!(state.snapshot().gate.is_none());
    let c = reqwest::Client::new();
    let req = chat_request("hard one");
    let r = post(&c, &base, &req).await;
    assert_eq!(r.status(), 200);
    assert_eq!(r.headers()["x-entgate-mode"], "passthrough");
    assert!(r.headers().get("x-entgate-gated").is_none());
    let got = r.bytes().await.unwrap();
    let sent = up.bodies.lock().unwrap()[0].clone();
    assert_eq!(got.as_ref(), stub_reply(&sent).as_slice());
    assert_eq!(sent["logprobs"], true);
    assert_eq!(sent["messages"], req["messages"]);
    assert_eq!(up.calls(), 1);
}

#[tokio::test]
async fn stop_rate_tracks_class_mix() {
    let (up_addr, _) = spawn_upstream().await;
    let (base, _) = spawn_gateway(gateway_config(up_addr, 1.0)).await;
    let c = reqwest::Client::new();
    // 12 of 30 prompts are easy.
    for i in 0..30 {
        let prompt = if i % 5 < 2 { "easy" } else { "hard" };
        assert_eq!(post(&c, &base, &chat_request(prompt)).await.status(), 200);
    }
    let m = metrics(&c, &base).await;
    let stop: f64 = m["stop_rate"].parse().unwrap();
    assert!((stop - 12.0 / 30.0).abs() < 1e-12, "{stop}");
    assert_eq!(m["requests_total"], "30");
    assert_eq!(m["upstream_steps_total"], (12 + 18 * 4).to_string());
}

#[tokio::test]
async fn client_and_upstream_errors() {
    let (up_addr, _) = spawn_upstream().await;
    let (base, _) = spawn_gateway(gateway_config(up_addr, 1.0)).await;
    let c = reqwest::Client::new();
    let r = c.post(format!("{base}/v1/chat/completions")).body("{not json").send().await.unwrap();
    assert_eq!(r.status(), 400);
    let r = post(&c, &base, &serde_json::json!({"messages": []})).await;
    assert_eq!(r.status(), 400);
    let mut streaming = chat_request("easy");
    streaming["stream"] = true.into();
    assert_eq!(post(&c, &base, &streaming).await.status(), 400);
    // An upstream 4xx about the request itself is relayed.
    assert_eq!(post(&c, &base, &chat_request("reject me")).await.status(), 422);

    // Upstream that has gone away.
    let mut cfg = gateway_config(up_addr, 1.0);
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    cfg.upstream.base_url = format!("http://{}/v1", dead.local_addr().unwrap());
    drop(dead);
    cfg.probe_upstream = false;
    let (base2, _) = spawn_gateway(cfg).await;
    let r = post(&c, &base2, &chat_request("easy")).await;
    assert_eq!(r.status(), 502);
    let v: serde_json::Value = r.json().await.unwrap();
    assert_eq!(v["error"]["type"], "upstream_error");
    let m = metrics(&c, &base2).await;
    assert_eq!(m["upstream_errors_total"], "1");
}

#[tokio::test]
async fn startup_probe_rejects_unreachable_upstream() {
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = dead.local_addr().unwrap();
    drop(dead);
    assert!(entgate_cli::gateway::Gateway::bind(gateway_config(addr, 1.0)).await.is_err());
}

fn record(tau: f64) -> CalibrationRecord {
    CalibrationRecord {
        method: ThresholdMethod::Mean,
        tau,
        mu_c: tau,
        sigma_c: 0.1,
        mu_i: tau + 0.2,
        sigma_i: 0.1,
        n_c: 10,
        n_i: 5,
        d: 2.0,
        created_at: 0,
    }
}

#[tokio::test]
async fn calibration_file_hot_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calibration.csv");
    record(-1.0).save(&path).unwrap();
    let (up_addr, _) = spawn_upstream().await;
    let mut cfg = gateway_config(up_addr, f64::NAN);
    cfg.calibration_file = Some(path.clone());
    cfg.reload_interval_ms = 50;
    let (base, state) = spawn_gateway(cfg).await;
    let c = reqwest::Client::new();
    assert_eq!(post(&c, &base, &chat_request("easy")).await.headers()["x-entgate-gated"], "false");

    record(5.0).save(&path).unwrap();
    // Coarse filesystem timestamps may hide the change from the poller.
    if !state.reload_if_changed() {
        assert!(state.force_reload());
    }
    assert_eq!(state.snapshot().gate.unwrap().tau, 5.0);
    let r = post(&c, &base, &chat_request("hard")).await;
    assert_eq!(r.headers()["x-entgate-gated"], "true");
    assert_eq!(metrics(&c, &base).await["tau"], "5");

    // A broken file keeps the previous threshold.
    std::fs::write(&path, "garbage").unwrap();
    assert!(!state.force_reload());
    assert_eq!(state.snapshot().gate.unwrap().tau, 5.0);
}

#[tokio::test]
async fn every_request_sees_one_tau() {
    let (up_addr, _) = spawn_upstream().await;
    let (base, state) = spawn_gateway(gateway_config(up_addr, 0.5)).await;
    let c = reqwest::Client::new();
    let flipper = {
        let state = state.clone();
        tokio::spawn(async move {
            for i in 0..200 {
                state.set_tau(Some(if i % 2 == 0 { 5.0 } else { 0.5 }));
                tokio::task::yield_now().await;
            }
        })
    };
    let reqs = (0..40).map(|_| {
        let c = c.clone();
        let base = base.clone();
        async move { post(&c, &base, &chat_request("hard")).await }
    });
    for r in futures_join(reqs).await {
        let tau: f64 = r.headers()["x-entgate-tau"].to_str().unwrap().parse().unwrap();
        let gated = r.headers()["x-entgate-gated"] == "true";
        let steps = r.headers()["x-entgate-steps"].to_str().unwrap();
        // Entropy 4.32 bits: gated exactly when the request's own tau is 5.
        assert_eq!(gated, tau == 5.0);
        assert_eq!(steps, if gated { "1" } else { "4" });
    }
    flipper.await.unwrap();
}

async fn futures_join<F>(fs: impl Iterator<Item = F>) -> Vec<F::Output>
where
    F: std::future::Future + Send + 'static,
    F::Output: Send + 'static,
{
    let handles: Vec<_> = fs.map(tokio::spawn).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}
