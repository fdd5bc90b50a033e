mod common;

use std::path::Path;
use std::process::{Command, Output};

use entgate_core::synth::ClassMoments;
use entgate_core::SynthSpec;

fn entgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entgate"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_line(o: &Output) -> serde_json::Value {
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    serde_json::from_str(err.lines().last().expect("an error line")).expect("error line is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// The Qwen3 AIME'24 moment row at n = 30.
fn table_spec() -> SynthSpec {
    SynthSpec {
        model_name: "qwen3-30b".into(),
        dataset: "aime24".into(),
        questions: 30,
        correct: ClassMoments { mean: 0.244, sd: 0.094 },
        incorrect: ClassMoments { mean: 0.447, sd: 0.114 },
        step1_accuracy: 0.7,
        final_accuracy: 0.733,
        ..Default::default()
    }
}

fn write_spec(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("spec.toml");
    std::fs::write(&path, toml::to_string(&table_spec()).unwrap()).unwrap();
    path
}

#[test]
fn budget_prints_enhanced_allocation() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.csv");
    let o = entgate(&["budget", "--alpha", "100", "--beta", "8192", "--gamma", "50", "--delta", "30", "--out", p(&plan)]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("enhanced allocation 3.5\n"), "{out}");
    assert!(out.contains("conservation pass"));
    let text = std::fs::read_to_string(&plan).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert_eq!(text.lines().filter(|l| l.ends_with(",4")).count(), 10);
    assert_eq!(text.lines().filter(|l| l.ends_with(",3")).count(), 10);
}

#[test]
fn budget_from_entropy_order() {
    let dir = tempfile::tempdir().unwrap();
    let order = dir.path().join("order.csv");
    std::fs::write(&order, "question_id,entropy\na,0.1\nb,0.9\nc,0.5\nd,0.2\n").unwrap();
    let plan = dir.path().join("plan.csv");
    let o = entgate(&["budget", "--alpha", "7", "--beta", "100", "--order", p(&order), "--tau", "0.3", "--out", p(&plan)]);
    assert!(o.status.success(), "{:?}", error_line(&o));
    // Two confident, five calls over b (highest entropy first) and c.
    assert!(stdout(&o).contains("enhanced allocation 2.5"));
    let text = std::fs::read_to_string(&plan).unwrap();
    assert!(text.contains("b,3\n") && text.contains("c,2\n") && text.contains("a,1\n"), "{text}");
}

#[test]
fn calibrate_below_floor_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("s.csv");
    std::fs::write(&samples, "entropy,correct\n0.1,1\n0.2,1\n0.4,0\n0.15,1\n").unwrap();
    let out = dir.path().join("c.csv");
    let o = entgate(&["calibrate", "--samples", p(&samples), "--method", "mean", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"], "BelowSampleFloor");
    assert!(!out.exists());

    let o = entgate(&["calibrate", "--samples", p(&samples), "--method", "mean", "--allow-undersampled", "--out", p(&out)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("tau 0.15\n"), "{}", stdout(&o));
    assert!(std::fs::read_to_string(&out).unwrap().starts_with("method,tau,"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let traces = dir.path().join("t.jsonl");
    assert!(entgate(&["synth", "--spec", p(&spec), "--out", p(&traces)]).status.success());
    let o = entgate(&["replay", "--traces", p(&traces)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "Usage");
    let o = entgate(&["replay", "--traces", "/nonexistent/t.jsonl", "--tau", "0.3"]);
    assert_eq!(error_line(&o)["error"], "Io");
}

#[test]
fn offline_commands_are_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for t in [&a, &b] {
        assert!(entgate(&["synth", "--spec", p(&spec), "--seed", "9", "--out", p(t)]).status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let replay = |seed: &str| stdout(&entgate(&["replay", "--traces", p(&a), "--method", "bayes", "--seed", seed]));
    assert_eq!(replay("4"), replay("4"));
    let sweep = |seed: &str| stdout(&entgate(&["sweep-methods", "--traces", p(&a), "--seed", seed]));
    assert_eq!(sweep("1"), sweep("1"));
}

#[test]
fn replay_matches_golden_table() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let traces = dir.path().join("t.jsonl");
    assert!(entgate(&["synth", "--spec", p(&spec), "--seed", "2024", "--out", p(&traces)]).status.success());
    let o = entgate(&["sweep-methods", "--traces", p(&traces), "--seed", "7"]);
    assert!(o.status.success());
    let got = stdout(&o);
    let header = got.lines().next().unwrap();
    for col in ["step1_acc", "fourstep_acc", "thresh_acc", "cohens_d", "token_savings", "delta_acc"] {
        assert!(header.split(',').any(|c| c == col), "missing {col}");
    }
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/sweep_methods.csv");
    if std::env::var_os("ENTGATE_BLESS").is_some() {
        std::fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, std::fs::read_to_string(&golden).expect("golden file; rerun with ENTGATE_BLESS=1"));
}

#[test]
fn step_and_k_tables() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let traces = dir.path().join("t.jsonl");
    assert!(entgate(&["synth", "--spec", p(&spec), "--out", p(&traces)]).status.success());
    let o = entgate(&["step-progression", "--traces", p(&traces)]);
    assert_eq!(stdout(&o).lines().count(), 5);
    let o = entgate(&["sweep-k", "--traces", p(&traces), "--ks", "5,20"]);
    assert_eq!(stdout(&o).lines().count(), 3);
    let o = entgate(&["sweep-k", "--traces", p(&traces), "--ks", "40"]);
    assert_eq!(error_line(&o)["error"], "KExceedsRecorded");
}

fn endpoint_file(dir: &Path, upstream: std::net::SocketAddr) -> std::path::PathBuf {
    let path = dir.join("endpoint.toml");
    std::fs::write(
        &path,
        format!("base_url = \"http://{upstream}/v1\"\nmodel = \"stub\"\napi_key_env = \"ENTGATE_TEST_NO_KEY\"\n"),
    )
    .unwrap();
    path
}

fn questions_file(dir: &Path, prompts: &[&str]) -> std::path::PathBuf {
    let path = dir.join("questions.jsonl");
    let lines: Vec<String> = prompts
        .iter()
        .enumerate()
        .map(|(i, q)| {
            serde_json::json!({"question_id": format!("q{i}"), "dataset": "aime", "question": q, "gold_answer": "7"})
                .to_string()
        })
        .collect();
    std::fs::write(&path, lines.join("\n")).unwrap();
    path
}

async fn in_blocking(args: Vec<String>) -> Output {
    tokio::task::spawn_blocking(move || {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        entgate(&refs)
    })
    .await
    .unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn live_run_records_gated_traces() {
    let (addr, up) = common::spawn_upstream().await;
    let dir = tempfile::tempdir().unwrap();
    let ep = endpoint_file(dir.path(), addr);
    let qs = questions_file(dir.path(), &["easy", "hard", "easy"]);
    let out = dir.path().join("live.jsonl");
    let args: Vec<String> = ["run", "--questions", p(&qs), "--endpoint", p(&ep), "--gate", "--tau", "1.0", "--out", p(&out)]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let o = in_blocking(args).await;
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(up.calls(), 1 + 4 + 1);
    let set = entgate_core::load_traces(&out).unwrap();
    let mut steps: Vec<(String, usize)> = set.questions.iter().map(|q| (q.question_id.clone(), q.steps.len())).collect();
    steps.sort();
    assert_eq!(steps, vec![("q0".into(), 1), ("q1".into(), 4), ("q2".into(), 1)]);
    assert!(set.questions.iter().all(|q| q.step_correct.iter().all(|&c| c)));
}

#[tokio::test(flavor = "multi_thread")]
async fn live_budget_spends_exactly_the_plan() {
    let (addr, up) = common::spawn_upstream().await;
    let dir = tempfile::tempdir().unwrap();
    let ep = endpoint_file(dir.path(), addr);
    let qs = questions_file(dir.path(), &["a", "b", "c", "d"]);
    let plan = dir.path().join("plan.csv");
    std::fs::write(&plan, "question_id,calls\nq0,1\nq1,1\nq2,3\nq3,2\n").unwrap();
    let out = dir.path().join("budget.jsonl");
    let args: Vec<String> = [
        "run-budget", "--questions", p(&qs), "--plan", p(&plan), "--policy", "self-consistency",
        "--endpoint", p(&ep), "--out", p(&out),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let o = in_blocking(args).await;
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(up.calls(), 7);
    assert!(stdout(&o).contains("q2,3,7\n"));
    assert_eq!(entgate_core::load_traces(&out).unwrap().questions.len(), 4);
}
