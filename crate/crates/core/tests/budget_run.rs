use entgate_core::budget::{plan_budget, BudgetParams};
use entgate_core::client::testing::{completion_body, peaked_rows, ScriptedTransport};
use entgate_core::client::{run_budget, run_question, BudgetPolicy, EndpointConfig, QuestionInput};
use entgate_core::plan_budget_anonymous;

fn questions(n: usize) -> Vec<QuestionInput> {
    (1..=n)
        .map(|i| QuestionInput {
            question_id: format!("q{i:04}"),
            dataset: "aime".into(),
            question: format!("question {i}"),
            gold_answer: "5".into(),
            kind: None,
        })
        .collect()
}

fn endpoint() -> EndpointConfig {
    EndpointConfig { model: "stub".into(), ..Default::default() }
}

fn stub() -> ScriptedTransport {
    ScriptedTransport::constant(completion_body("The answer is 5.", &peaked_rows(4, 20)))
}

#[tokio::test]
async fn reference_plan_issues_exactly_alpha_calls() {
    let params = BudgetParams { alpha: 100, beta: 8192, gamma: 50, delta: 30 };
    let plan = plan_budget_anonymous(params).unwrap();
    let alloc: Vec<(String, u64)> =
        plan.allocations.iter().map(|a| (a.question_id.clone(), a.calls)).collect();
    assert_eq!(alloc.iter().filter(|a| a.1 == 4).count(), 10);
    assert_eq!(alloc.iter().filter(|a| a.1 == 3).count(), 10);

    for policy in [BudgetPolicy::SequentialRefine, BudgetPolicy::SelfConsistency] {
        let t = stub();
        let run = run_budget(&t, &questions(50), &alloc, policy, &endpoint(), 8).await.unwrap();
        // The counting stub is the ledger oracle: it never sees the plan.
        assert_eq!(t.calls(), 100, "{policy:?}");
        assert_eq!(run.calls_issued, 100);
        for (o, a) in run.outcomes.iter().zip(&plan.allocations) {
            assert_eq!(o.trace.question_id, a.question_id);
            assert_eq!(o.trace.steps.len() as u64, a.calls);
            assert_eq!(o.aggregate_answer.as_deref(), Some("5"));
        }
    }
}

#[tokio::test]
async fn single_call_plan_matches_run_question() {
    let qs = questions(6);
    let ids: Vec<String> = qs.iter().map(|q| q.question_id.clone()).collect();
    let plan = plan_budget(6, 8192, &ids, &[]).unwrap();
    let alloc: Vec<(String, u64)> =
        plan.allocations.iter().map(|a| (a.question_id.clone(), a.calls)).collect();

    let t = stub();
    let run = run_budget(&t, &qs, &alloc, BudgetPolicy::SequentialRefine, &endpoint(), 3)
        .await
        .unwrap();
    let single = EndpointConfig { max_steps: 1, ..endpoint() };
    for (q, o) in qs.iter().zip(&run.outcomes) {
        let direct = run_question(&stub(), q, &single, None).await.unwrap();
        assert_eq!(direct, o.trace);
    }
    assert_eq!(t.calls(), 6);
}
