//! Live gating and offline replay must agree on the same traces.

use std::sync::Arc;

use entgate_core::client::testing::{completion_body, peaked_rows, uniform_rows, ScriptedTransport};
use entgate_core::client::{run_batch, EndpointConfig, LiveGateConfig, QuestionInput, RawResponse};
use entgate_core::replay::gate_all;
use entgate_core::trace::{read_traces, TraceSet, TraceWriter};

fn question_index(body: &serde_json::Value) -> usize {
    let text = body["messages"][0]["content"].as_str().unwrap();
    text.trim_start_matches("question ").parse().unwrap()
}

#[tokio::test]
async fn live_decisions_survive_round_trip() {
    // Even questions are confident (near-zero entropy), odd ones uniform over 8.
    let t = Arc::new(ScriptedTransport::new(|body, _| {
        let i = question_index(body);
        let rows = if i % 2 == 0 { peaked_rows(6, 8) } else { uniform_rows(6, 8) };
        Ok(RawResponse::json(200, &completion_body(&format!("answer is {}", i % 3), &rows)))
    }));
    let qs: Vec<QuestionInput> = (0..20)
        .map(|i| QuestionInput {
            question_id: format!("q{i}"),
            dataset: "aime".into(),
            question: format!("question {i}"),
            gold_answer: "0".into(),
            kind: None,
        })
        .collect();
    let ep = EndpointConfig { model: "stub".into(), top_logprobs: 8, ..Default::default() };
    let gate = LiveGateConfig::new(1.5, 8);

    let mut set = TraceSet::new("stub", 8, 0.7);
    let mut writer = TraceWriter::new(Vec::new(), &set.header()).unwrap();
    let mut results = Vec::new();
    run_batch(t.as_ref(), &qs, &ep, Some(&gate), 4, |i, r| {
        let tr = r.unwrap();
        writer.append(&tr).unwrap();
        results.push((i, tr));
    })
    .await;
    assert_eq!(results.len(), 20);
    // 10 gated questions at one call, 10 at four.
    assert_eq!(t.calls(), 10 + 40);

    let loaded = read_traces(writer.into_inner().as_slice()).unwrap();
    results.sort_by_key(|r| r.0);
    set.questions = results.into_iter().map(|r| r.1).collect();
    let mut by_id = loaded.questions.clone();
    by_id.sort_by_key(|q| q.question_id[1..].parse::<usize>().unwrap());
    assert_eq!(by_id, set.questions);

    for o in gate_all(&loaded, gate.tau, gate.k_limit).unwrap() {
        let i: usize = o.question_id[1..].parse().unwrap();
        assert_eq!(o.gated, i % 2 == 0, "{}", o.question_id);
    }
}
