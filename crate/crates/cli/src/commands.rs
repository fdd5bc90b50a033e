//! Subcommand definitions and their implementations.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use entgate_core::budget::{plan_budget, read_plan_csv, verify_conservation, BudgetParams};
use entgate_core::client::{
    load_questions, run_batch, run_budget, BudgetPolicy, EndpointConfig, LiveGateConfig,
};
use entgate_core::replay::{
    calibration_samples, evaluate_tau, k_sweep, method_sweep, step_progression, write_reports_csv,
};
use entgate_core::threshold::{read_samples_csv, CalibrateOptions, CalibrationRecord};
use entgate_core::trace::{load_traces, save_traces, TraceSet, TraceWriter};
use entgate_core::{calibrate, plan_budget_anonymous, synthesize_traces, BootstrapConfig, SynthSpec, ThresholdMethod};
use serde::Deserialize;

use crate::error::CliError;
use crate::gateway::{serve, GatewayConfig};

#[derive(Debug, Parser)]
#[command(name = "entgate", version, about = "Entropy-gated early stopping for multi-step LLM reasoning")]
pub struct Cli {
    /// Seed for every randomized step (bootstrap, synthesis).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Derive a stopping threshold from labeled step-1 entropies.
    Calibrate(CalibrateArgs),
    /// Replay recorded traces under a threshold and report metrics.
    Replay(ReplayArgs),
    /// Calibrate and replay every threshold method.
    SweepMethods(SweepMethodsArgs),
    /// Recompute entropies at several top-k widths.
    SweepK(SweepKArgs),
    /// Class-mean entropy at each refinement step.
    StepProgression(StepProgressionArgs),
    /// Plan a fixed call budget across confident and uncertain questions.
    Budget(BudgetArgs),
    /// Generate a synthetic trace file.
    Synth(SynthArgs),
    /// Ask questions live and record traces.
    Run(RunArgs),
    /// Execute a budget plan live.
    RunBudget(RunBudgetArgs),
    /// Run the gating proxy.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TraceInput {
    /// Trace file (JSONL).
    #[arg(long)]
    pub traces: PathBuf,
    /// Top-k alternatives per token used for entropy.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct BootArgs {
    /// Bootstrap resamples for the Δ-Acc interval.
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, conflicts_with = "samples", required_unless_present = "samples")]
    pub traces: Option<PathBuf>,
    /// CSV of `entropy,correct` rows.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long, default_value = "mean")]
    pub method: ThresholdMethod,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Calibrate even below the method's recommended sample count.
    #[arg(long)]
    pub allow_undersampled: bool,
    #[arg(long, default_value = "calibration.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub input: TraceInput,
    /// Calibrate this method on `--calibrate-on` (default: the replayed traces).
    #[arg(long, conflicts_with_all = ["tau", "calibration"])]
    pub method: Option<ThresholdMethod>,
    #[arg(long, conflicts_with = "calibration", allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Calibration file written by `calibrate`.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long, requires = "method")]
    pub calibrate_on: Option<PathBuf>,
    #[arg(long)]
    pub allow_undersampled: bool,
    #[command(flatten)]
    pub boot: BootArgs,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepMethodsArgs {
    #[command(flatten)]
    pub input: TraceInput,
    #[arg(long)]
    pub allow_undersampled: bool,
    #[command(flatten)]
    pub boot: BootArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepKArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long, default_value = "mean")]
    pub method: ThresholdMethod,
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub allow_undersampled: bool,
    #[command(flatten)]
    pub boot: BootArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StepProgressionArgs {
    #[command(flatten)]
    pub input: TraceInput,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// Total calls available.
    #[arg(long)]
    pub alpha: u64,
    /// Tokens per call.
    #[arg(long)]
    pub beta: u64,
    /// Number of questions (derived from `--order` when given).
    #[arg(long)]
    pub gamma: Option<u64>,
    /// Number of confident questions (derived from `--order` when given).
    #[arg(long)]
    pub delta: Option<u64>,
    /// CSV of `question_id,entropy`; questions at or below `--tau` are confident.
    #[arg(long, requires = "tau")]
    pub order: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long, default_value = "plan.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator spec, TOML or JSON.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EndpointArgs {
    /// Endpoint settings (TOML).
    #[arg(long)]
    pub endpoint: Option<PathBuf>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Questions in flight at once.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
}

impl EndpointArgs {
    fn resolve(&self) -> Result<EndpointConfig, CliError> {
        let mut ep = match &self.endpoint {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                toml::from_str(&text).map_err(|e| CliError::new("Config", format!("{}: {e}", path.display())))?
            }
            None => EndpointConfig::default(),
        };
        if let Some(u) = &self.base_url {
            ep.base_url = u.clone();
        }
        if let Some(m) = &self.model {
            ep.model = m.clone();
        }
        ep.validate()?;
        Ok(ep)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Questions (JSONL: question_id, question, dataset, gold_answer).
    #[arg(long)]
    pub questions: PathBuf,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    /// Stop after step 1 when its entropy is at or below the threshold.
    #[arg(long)]
    pub gate: bool,
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long, conflicts_with = "tau")]
    pub calibration: Option<PathBuf>,
    /// Alternatives per token used by the gate (default: endpoint top_logprobs).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunBudgetArgs {
    #[arg(long)]
    pub questions: PathBuf,
    /// Plan CSV written by `budget`.
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, default_value = "sequential-refine")]
    pub policy: BudgetPolicy,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn boot(args: &BootArgs, seed: u64) -> BootstrapConfig {
    BootstrapConfig { iterations: args.iterations, ..BootstrapConfig::with_seed(seed) }
}

fn opts(allow_undersampled: bool) -> CalibrateOptions {
    CalibrateOptions { allow_undersampled }
}

pub async fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Replay(a) => cmd_replay(a, seed),
        Command::SweepMethods(a) => {
            let traces = load_traces(&a.input.traces)?;
            let rows = method_sweep(
                &traces,
                &ThresholdMethod::ALL,
                a.input.k,
                opts(a.allow_undersampled),
                &boot(&a.boot, seed),
            )?;
            write_reports_csv(rows.iter().map(|r| &r.report), output(a.out.as_deref())?)?;
            Ok(())
        }
        Command::SweepK(a) => {
            let traces = load_traces(&a.traces)?;
            let rows = k_sweep(&traces, &a.ks, a.method, opts(a.allow_undersampled), &boot(&a.boot, seed))?;
            write_reports_csv(rows.iter().map(|r| &r.report), output(a.out.as_deref())?)?;
            Ok(())
        }
        Command::StepProgression(a) => {
            let traces = load_traces(&a.input.traces)?;
            let mut w = output(a.out.as_deref())?;
            writeln!(w, "step,correct_mean,incorrect_mean,n_correct,n_incorrect")?;
            let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            for r in step_progression(&traces, a.input.k) {
                writeln!(w, "{},{},{},{},{}", r.step, f(r.correct_mean), f(r.incorrect_mean), r.n_correct, r.n_incorrect)?;
            }
            w.flush()?;
            Ok(())
        }
        Command::Budget(a) => cmd_budget(a),
        Command::Synth(a) => {
            let text = std::fs::read_to_string(&a.spec)?;
            let spec: SynthSpec = if a.spec.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| CliError::new("Config", e.to_string()))?
            } else {
                toml::from_str(&text).map_err(|e| CliError::new("Config", e.to_string()))?
            };
            let set = synthesize_traces(&spec, seed)?;
            save_traces(&set, &a.out)?;
            println!("wrote {} questions to {}", set.questions.len(), a.out.display());
            Ok(())
        }
        Command::Run(a) => cmd_run(a).await,
        Command::RunBudget(a) => cmd_run_budget(a).await,
        Command::Serve(a) => serve(GatewayConfig::load(&a.config)?).await,
    }
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<(), CliError> {
    let samples = match (&a.traces, &a.samples) {
        (Some(t), _) => calibration_samples(&load_traces(t)?, a.k)?,
        (None, Some(s)) => read_samples_csv(File::open(s)?)?,
        (None, None) => return Err(CliError::usage("one of --traces or --samples is required")),
    };
    let decision = calibrate(&samples, a.method, opts(a.allow_undersampled))?;
    let s = &decision.stats;
    println!("method {}", decision.method);
    println!("tau {}", decision.tau);
    println!("mu_c {}\nsigma_c {}\nn_c {}", s.mu_c, s.sigma_c, s.n_c);
    println!("mu_i {}\nsigma_i {}\nn_i {}", s.mu_i, s.sigma_i, s.n_i);
    println!("d {}", s.d);
    for n in &decision.notes {
        println!("note {n}");
    }
    CalibrationRecord::from_decision(&decision).save(&a.out)?;
    Ok(())
}

fn cmd_replay(a: ReplayArgs, seed: u64) -> Result<(), CliError> {
    let traces = load_traces(&a.input.traces)?;
    let k = a.input.k;
    let (tau, method) = match (a.method, a.tau, &a.calibration) {
        (Some(m), _, _) => {
            let calib_set = match &a.calibrate_on {
                Some(p) => load_traces(p)?,
                None => traces.clone(),
            };
            let d = calibrate(&calibration_samples(&calib_set, k)?, m, opts(a.allow_undersampled))?;
            (d.tau, Some(m))
        }
        (None, Some(t), _) => (t, None),
        (None, None, Some(p)) => {
            let rec = CalibrationRecord::load(p)?;
            (rec.tau, Some(rec.method))
        }
        (None, None, None) => return Err(CliError::usage("one of --method, --tau or --calibration is required")),
    };
    let report = evaluate_tau(&traces, tau, method, k, &boot(&a.boot, seed))?;
    write_reports_csv([&report], output(a.out.as_deref())?)?;
    Ok(())
}

#[derive(Deserialize)]
struct OrderRow {
    question_id: String,
    entropy: f64,
}

fn cmd_budget(a: BudgetArgs) -> Result<(), CliError> {
    let plan = match &a.order {
        Some(path) => {
            let tau = a.tau.expect("clap enforces --tau with --order");
            let mut rows: Vec<OrderRow> = csv::Reader::from_path(path)
                .and_then(|mut r| r.deserialize().collect())
                .map_err(|e| CliError::new("File", format!("{}: {e}", path.display())))?;
            let gamma = rows.len() as u64;
            rows.sort_by(|x, y| y.entropy.total_cmp(&x.entropy));
            let (uncertain, confident): (Vec<OrderRow>, Vec<OrderRow>) =
                rows.into_iter().partition(|r| r.entropy > tau);
            let delta = confident.len() as u64;
            if a.gamma.is_some_and(|g| g != gamma) || a.delta.is_some_and(|d| d != delta) {
                return Err(CliError::usage(format!(
                    "order file gives gamma={gamma}, delta={delta}, which disagrees with the flags"
                )));
            }
            let ids = |v: Vec<OrderRow>| v.into_iter().map(|r| r.question_id).collect::<Vec<_>>();
            plan_budget(a.alpha, a.beta, &ids(confident), &ids(uncertain))?
        }
        None => {
            let (Some(gamma), Some(delta)) = (a.gamma, a.delta) else {
                return Err(CliError::usage("--gamma and --delta are required without --order"));
            };
            plan_budget_anonymous(BudgetParams { alpha: a.alpha, beta: a.beta, gamma, delta })?
        }
    };
    match plan.params.enhanced_allocation() {
        Some(x) => println!("enhanced allocation {x}"),
        None => println!("enhanced allocation n/a (no uncertain questions)"),
    }
    let r = verify_conservation(&plan);
    println!("total_calls {}", r.total_calls);
    println!("surplus_calls {}", r.surplus_calls);
    println!("alpha {}", r.alpha);
    println!("token_ceiling {}", r.token_ceiling);
    println!("token_budget {}", r.token_budget);
    println!("discrepancy {}", r.discrepancy);
    println!("confident_single_call {}", r.confident_single_call);
    println!("conservation {}", if r.pass { "pass" } else { "FAIL" });
    plan.write_csv(BufWriter::new(File::create(&a.out)?))?;
    if !r.pass {
        return Err(CliError::new("ConservationViolated", format!("discrepancy {}", r.discrepancy)));
    }
    Ok(())
}

fn header_for(ep: &EndpointConfig) -> TraceSet {
    TraceSet::new(ep.model.clone(), ep.top_logprobs, ep.temperature)
}

async fn cmd_run(a: RunArgs) -> Result<(), CliError> {
    let ep = a.endpoint.resolve()?;
    let questions = load_questions(&a.questions)?;
    let gate = if a.gate {
        let tau = match (a.tau, &a.calibration) {
            (Some(t), _) => t,
            (None, Some(p)) => CalibrationRecord::load(p)?.tau,
            (None, None) => return Err(CliError::usage("--gate needs --tau or --calibration")),
        };
        Some(LiveGateConfig::new(tau, a.k.unwrap_or(ep.top_logprobs)))
    } else {
        None
    };
    let transport = ep.http_transport()?;
    let mut writer = TraceWriter::create(&a.out, &header_for(&ep).header())?;
    let mut first_err: Option<CliError> = None;
    let (mut ok, mut failed, mut gated) = (0usize, 0usize, 0usize);
    run_batch(&transport, &questions, &ep, gate.as_ref(), a.endpoint.concurrency, |i, r| match r {
        Ok(trace) => {
            ok += 1;
            gated += usize::from(trace.steps.len() == 1 && ep.max_steps > 1);
            if let Err(e) = writer.append(&trace) {
                first_err.get_or_insert(e.into());
            }
        }
        Err(e) => {
            failed += 1;
            tracing::error!(question = %questions[i].question_id, error = %e, "question failed");
            first_err.get_or_insert(e.into());
        }
    })
    .await;
    println!("questions {ok} recorded, {failed} failed, {gated} stopped after step 1");
    first_err.map_or(Ok(()), Err)
}

async fn cmd_run_budget(a: RunBudgetArgs) -> Result<(), CliError> {
    let ep = a.endpoint.resolve()?;
    let questions = load_questions(&a.questions)?;
    let plan = read_plan_csv(File::open(&a.plan)?)?;
    let transport = ep.http_transport()?;
    let run = run_budget(&transport, &questions, &plan, a.policy, &ep, a.endpoint.concurrency).await?;
    let mut set = header_for(&ep);
    println!("question_id,calls,aggregate_answer");
    for o in &run.outcomes {
        println!("{},{},{}", o.trace.question_id, o.calls, o.aggregate_answer.as_deref().unwrap_or(""));
    }
    set.questions = run.outcomes.into_iter().map(|o| o.trace).collect();
    save_traces(&set, &a.out)?;
    eprintln!("calls issued {}", run.calls_issued);
    Ok(())
}
