use std::path::{Path, PathBuf};

use naq_core::agents::pipeline::{SelectionReason, MAX_ATTEMPTS};
use naq_core::agents::{run_pipeline, AgentSet, FrozenClock, MockBackend, PipelineConfig, RunOutcome, Stage};
use naq_core::archir::{reference_bidmc_arch, reference_har_arch};
use naq_core::dataset::{load_dataset, TimeSeriesDataset};
use naq_core::profiler::Limits;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn har() -> TimeSeriesDataset {
    load_dataset(&fixtures().join("datasets"), "har_tiny").unwrap()
}

fn bidmc() -> TimeSeriesDataset {
    load_dataset(&fixtures().join("datasets"), "bidmc_tiny").unwrap()
}

fn mock(name: &str) -> MockBackend {
    MockBackend::from_file(&fixtures().join("mock").join(name)).unwrap()
}

fn transcript(name: &str) -> String {
    std::fs::read_to_string(fixtures().join("transcripts").join(name)).unwrap()
}

fn config() -> PipelineConfig {
    PipelineConfig {
        user_prompt: "Build a human activity classifier for a wearable with 1 MB RAM, 2 MB flash and at most 500 ms latency.".into(),
        ..PipelineConfig::default()
    }
}

fn run(cfg: &PipelineConfig, ds: &TimeSeriesDataset, backend: &mut MockBackend) -> RunOutcome {
    run_pipeline(cfg, ds, backend, &FrozenClock)
}

#[test]
fn full_har_run_selects_the_reference_architecture() {
    let ds = har();
    let out = run(&config(), &ds, &mut mock("har_full.jsonl"));
    let r = &out.report;
    assert_eq!(r.error, None);
    assert_eq!(r.rounds_used, 2);
    assert_eq!(r.rounds[0].candidate_ids.len(), 5);
    assert_eq!(r.rounds[0].eval_pick, Some(3));
    assert!(!r.rounds[0].accepted);
    assert!(r.rounds[0].feedback.as_deref().unwrap().contains("INFEASIBLE (flash"));
    assert_eq!(r.rounds[1].duplicates.len(), 1);
    assert_eq!(r.rounds[1].rejected.len(), 1);
    assert_eq!(r.rounds[1].rejected[0].position, 5);
    assert!(r.rounds[1].accepted);
    let sel = r.selected.as_ref().unwrap();
    assert_eq!(sel.reason, SelectionReason::EvalPick);
    assert!(sel.feasible && !sel.best_effort);
    assert_eq!(sel.arch.id, reference_har_arch(206, 3, 6).id);
    assert!(sel.predicted_performance.is_some());
    let script = r.script.as_ref().unwrap();
    assert!(script.frozen_regions_match);
    assert_eq!(script.path, "har_tiny.py");
    assert_eq!(r.ledger.totals.chat_calls, 6);
    assert!(r.ledger.totals.chat_calls <= r.ledger.max_chat_calls);
    let limits = r.limits.as_ref().unwrap();
    assert_eq!(limits.flash_bytes, Some(2_097_152));
    assert_eq!(limits.latency_ms, Some(500.0));
    assert_eq!(limits.sources["flash"], "query");
    assert!(out.script.unwrap().contains("keras.layers.LSTM(units=32"));
}

#[test]
fn runs_are_reproducible() {
    let ds = har();
    let a = run(&config(), &ds, &mut mock("har_full.jsonl"));
    let b = run(&config(), &ds, &mut mock("har_full.jsonl"));
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    assert_eq!(a.script, b.script);
    assert_eq!(a.images.iter().map(|i| &i.png).collect::<Vec<_>>(), b.images.iter().map(|i| &i.png).collect::<Vec<_>>());
}

#[test]
fn no_rewrite_makes_no_rewrite_call() {
    let ds = har();
    let cfg = PipelineConfig {
        no_rewrite: true,
        ..config()
    };
    let mut backend = mock("har_full.jsonl");
    let out = run(&cfg, &ds, &mut backend);
    assert!(!backend.calls().contains(&Stage::Rewrite));
    assert_eq!(out.report.ledger.totals.calls_by_stage.get(&Stage::Rewrite), None);
    assert!(out.report.flags.rewrite_skipped);
    let q = out.report.query.as_ref().unwrap();
    assert_eq!(q["task_description"], cfg.user_prompt.as_str());
    assert_eq!(q["model_aspects"]["hardware_specs"]["flash"], "");
    assert_eq!(out.report.limits.as_ref().unwrap().sources["flash"], "device");
    assert!(out.report.selected.is_some());
}

#[test]
fn code_only_is_one_call() {
    let ds = har();
    let cfg = PipelineConfig {
        agents: "code".parse().unwrap(),
        ..config()
    };
    let mut backend = mock("har_code_only.jsonl");
    let out = run(&cfg, &ds, &mut backend);
    assert_eq!(out.report.error, None);
    assert_eq!(backend.calls(), &[Stage::Code]);
    assert_eq!(out.report.ledger.totals.chat_calls, 1);
    assert!(out.report.rounds.is_empty());
    let sel = out.report.selected.as_ref().unwrap();
    assert_eq!(sel.reason, SelectionReason::CodeAgent);
    assert_eq!(sel.arch.id, reference_har_arch(206, 3, 6).id);
    assert!(out.report.script.as_ref().unwrap().frozen_regions_match);
}

#[test]
fn rewrite_retry_then_success() {
    let ds = har();
    let mut backend = mock("rewrite_retry.jsonl");
    let out = run(&config(), &ds, &mut backend);
    assert_eq!(out.report.ledger.totals.calls_by_stage[&Stage::Rewrite], 2);
    assert_eq!(out.report.flags.rewrite_failed, None);
    assert_eq!(out.report.query.as_ref().unwrap()["model_aspects"]["hardware_specs"]["ram"], "1048576");
    assert!(out.transcripts[0].parse_error.is_some());
}

#[test]
fn rewrite_failure_falls_back_to_passthrough() {
    let ds = har();
    let mut backend = MockBackend::default();
    backend.push(Stage::Rewrite, "no json here");
    backend.push(Stage::Rewrite, "still none");
    let out = run(&config(), &ds, &mut backend);
    assert!(out.report.flags.rewrite_failed.as_deref().unwrap().starts_with("RewriteFailed"));
    assert_eq!(out.report.ledger.totals.calls_by_stage[&Stage::Rewrite], MAX_ATTEMPTS);
    assert_eq!(out.report.query.as_ref().unwrap()["task_description"], config().user_prompt.as_str());
}

#[test]
fn bidmc_run_reads_the_flash_limit_and_design_extras() {
    let ds = bidmc();
    let cfg = PipelineConfig {
        user_prompt: "Estimate the respiratory rate on a fitness tracker with 32KB RAM and 64KB flash.".into(),
        ..PipelineConfig::default()
    };
    let out = run(&cfg, &ds, &mut mock("bidmc_full.jsonl"));
    let r = &out.report;
    assert_eq!(r.error, None);
    assert_eq!(r.query.as_ref().unwrap()["model_aspects"]["hardware_specs"]["flash"], "65536");
    let space = r.search_space.as_ref().unwrap();
    assert_eq!(space.get("LSTM_units").unwrap(), &[serde_json::json!(4), serde_json::json!(8)]);
    assert!(space.extras.contains_key("learning_rate"));
    assert!(r.flags.warnings.iter().any(|w| w.contains("learning_rate")));
    let sel = r.selected.as_ref().unwrap();
    assert_eq!(sel.arch.id, reference_bidmc_arch(400, 2).id);
    assert!(sel.feasible);
    assert_eq!(r.rounds_used, 1);
}

fn infeasible_round() -> String {
    "```python\n{\"layer_sequence\": [{\"layer_type\": \"Conv1D\", \"filters\": 64, \"kernel_size\": 3}, {\"layer_type\": \"Dense\", \"units\": 512}, {\"layer_type\": \"Dense\", \"units\": 6, \"activation\": \"softmax\"}]}\n```\n".to_string()
}

#[test]
fn budget_exhausted_gives_best_effort() {
    let ds = har();
    let mut backend = MockBackend::default();
    backend.push(Stage::Design, transcript("har_design.txt"));
    for units in [512, 1024, 2048] {
        backend.push(Stage::Search, infeasible_round().replace("512", &units.to_string()));
        backend.push(Stage::Eval, "Model Configuration #1 is the best, about 95% accuracy.");
    }
    let cfg = PipelineConfig {
        no_rewrite: true,
        ..config()
    };
    let out = run(&cfg, &ds, &mut backend);
    let r = &out.report;
    assert_eq!(r.rounds_used, 3);
    assert_eq!(r.candidates.len(), 3);
    let sel = r.selected.as_ref().unwrap();
    assert!(sel.best_effort && r.flags.best_effort);
    assert!(!sel.feasible);
    assert_eq!(sel.reason, SelectionReason::Deterministic);
    assert!(sel.arch.layers.iter().any(|l| l.units == Some(512)));
    assert!(r.ledger.totals.chat_calls <= r.ledger.max_chat_calls);
}

#[test]
fn shape_invalid_configs_are_rejected_with_reasons() {
    let ds = har();
    let good = |f: usize| format!("```python\n{{\"layer_sequence\": [{{\"layer_type\": \"Conv1D\", \"filters\": {f}, \"kernel_size\": 3}}, {{\"pooling_type\": \"max\", \"pool_size\": 2}}, {{\"layer_type\": \"Dense\", \"units\": 6, \"activation\": \"softmax\"}}]}}\n```\n");
    let bad = "```python\n{\"layer_sequence\": [{\"layer_type\": \"Conv1D\", \"filters\": 4, \"kernel_size\": 400}, {\"layer_type\": \"Dense\", \"units\": 6, \"activation\": \"softmax\"}]}\n```\n";
    let text = [good(4), bad.to_string(), good(8), bad.replace("400", "207"), good(12)].concat();
    let mut backend = MockBackend::default();
    backend.push(Stage::Design, transcript("har_design.txt"));
    backend.push(Stage::Search, text);
    backend.push(Stage::Eval, "Model Configuration #2");
    let cfg = PipelineConfig {
        no_rewrite: true,
        ..config()
    };
    let out = run(&cfg, &ds, &mut backend);
    let round = &out.report.rounds[0];
    assert_eq!(round.proposed, 5);
    assert_eq!(round.candidate_ids.len(), 3);
    assert_eq!(round.rejected.iter().map(|r| r.position).collect::<Vec<_>>(), vec![2, 4]);
    assert!(round.rejected.iter().all(|r| r.reason.contains("shape underflow")));
    assert_eq!(out.report.selected.as_ref().unwrap().id, round.candidate_ids[1]);
}

#[test]
fn design_failure_uses_fallback_space() {
    let ds = har();
    let mut backend = MockBackend::default();
    backend.push(Stage::Design, "");
    backend.push(Stage::Design, "I cannot help with that.");
    backend.push(Stage::Search, transcript("har_search_r2.txt"));
    backend.push(Stage::Eval, transcript("har_eval.txt"));
    let cfg = PipelineConfig {
        no_rewrite: true,
        ..config()
    };
    let out = run(&cfg, &ds, &mut backend);
    assert!(out.report.flags.design_fallback.is_some());
    assert_eq!(out.report.search_space, Some(naq_core::archir::default_space()));
    assert!(out.report.selected.is_some());
}

#[test]
fn eval_failure_keeps_deterministic_ranking() {
    let ds = har();
    let mut backend = MockBackend::default();
    backend.push(Stage::Design, transcript("har_design.txt"));
    backend.push(Stage::Search, transcript("har_search_r1.txt"));
    let cfg = PipelineConfig {
        no_rewrite: true,
        ..config()
    };
    let out = run(&cfg, &ds, &mut backend);
    let r = &out.report;
    assert_eq!(r.flags.eval_llm_failed_rounds, vec![1]);
    assert!(r.rounds[0].accepted);
    let sel = r.selected.as_ref().unwrap();
    assert_eq!(sel.reason, SelectionReason::Deterministic);
    let fastest = r
        .candidates
        .iter()
        .filter(|c| c.verdict.as_ref().unwrap().feasible)
        .map(|c| c.profile.as_ref().unwrap().latency_ms)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(sel.profile.as_ref().unwrap().latency_ms, fastest);
}

#[test]
fn verdicts_do_not_depend_on_eval_text() {
    let ds = har();
    let verdicts = |eval: &str| {
        let mut backend = MockBackend::default();
        backend.push(Stage::Design, transcript("har_design.txt"));
        backend.push(Stage::Search, transcript("har_search_r1.txt"));
        backend.push(Stage::Eval, eval);
        let cfg = PipelineConfig {
            no_rewrite: true,
            budget: 1,
            ..config()
        };
        run(&cfg, &ds, &mut backend)
            .report
            .candidates
            .iter()
            .map(|c| (c.arch.id.clone(), c.verdict.clone()))
            .collect::<Vec<_>>()
    };
    let praise = verdicts("Model Configuration #3 fits every constraint perfectly and is feasible.");
    let scorn = verdicts("Model Configuration #1 is the only one that could ever work.");
    assert_eq!(praise, scorn);
    assert!(praise.iter().any(|(_, v)| !v.as_ref().unwrap().feasible));
}

#[test]
fn explicit_limits_override_the_query() {
    let ds = har();
    let cfg = PipelineConfig {
        limit_flags: Limits {
            flash_bytes: Some(20_000),
            ..Limits::default()
        },
        ..config()
    };
    let out = run(&cfg, &ds, &mut mock("har_full.jsonl"));
    let limits = out.report.limits.as_ref().unwrap();
    assert_eq!(limits.flash_bytes, Some(20_000));
    assert_eq!(limits.sources["flash"], "flag");
    for c in &out.report.candidates {
        let flash = c.profile.as_ref().unwrap().flash_bytes;
        assert_eq!(c.verdict.as_ref().unwrap().violations.iter().any(|v| v.metric == "flash"), flash > 20_000);
    }
}

#[test]
fn code_agent_writes_when_enabled() {
    let ds = har();
    let mut backend = mock("har_full.jsonl");
    backend.push(Stage::Code, format!("```python\n{}```\n", transcript("har_code_result.py")));
    let cfg = PipelineConfig {
        code_agent_writes: true,
        ..config()
    };
    let out = run(&cfg, &ds, &mut backend);
    let s = out.report.script.as_ref().unwrap();
    assert_eq!(s.matches_selection, Some(true));
    assert!(s.frozen_regions_match);
    assert!(out.script.unwrap().contains("keras.layers.BatchNormalization(),"));
}

#[test]
fn tampered_code_agent_script_falls_back_to_emission() {
    let ds = bidmc();
    let mut backend = mock("bidmc_full.jsonl");
    let tampered = format!("```python\n{}```\n", transcript("bidmc_code_result.py"));
    backend.push(Stage::Code, tampered.clone());
    backend.push(Stage::Code, tampered);
    let cfg = PipelineConfig {
        code_agent_writes: true,
        ..PipelineConfig::default()
    };
    let out = run(&cfg, &ds, &mut backend);
    assert!(out.report.flags.code_agent_fallback.as_deref().unwrap().contains("template"));
    assert_eq!(out.report.ledger.totals.calls_by_stage[&Stage::Code], 2);
    assert!(out.report.script.as_ref().unwrap().frozen_regions_match);
}

#[test]
fn search_code_subset_skips_design_and_eval() {
    let ds = har();
    let cfg = PipelineConfig {
        agents: "search,code".parse::<AgentSet>().unwrap(),
        no_rewrite: true,
        ..config()
    };
    let mut backend = mock("har_full.jsonl");
    let out = run(&cfg, &ds, &mut backend);
    assert_eq!(backend.calls(), &[Stage::Search]);
    assert_eq!(out.report.selected.as_ref().unwrap().reason, SelectionReason::FirstCandidate);
    assert!(out.report.search_space.is_none());
}

#[test]
fn design_code_subset_lets_the_code_agent_build_from_the_space() {
    let ds = har();
    let cfg = PipelineConfig {
        agents: "design,code".parse::<AgentSet>().unwrap(),
        no_rewrite: true,
        ..config()
    };
    let mut backend = mock("har_full.jsonl");
    backend.push(Stage::Code, format!("```python\n{}```\n", transcript("har_code_result.py")));
    let out = run(&cfg, &ds, &mut backend);
    assert_eq!(backend.calls(), &[Stage::Design, Stage::Code]);
    assert_eq!(out.report.selected.as_ref().unwrap().reason, SelectionReason::CodeAgent);
    assert!(out.report.rounds.is_empty());
}

#[test]
fn manager_review_is_optional() {
    let ds = har();
    let mut backend = mock("har_full.jsonl");
    backend.push(Stage::Manager, "APPROVED. The model meets every limit.");
    let cfg = PipelineConfig {
        manager_verify: true,
        ..config()
    };
    let out = run(&cfg, &ds, &mut backend);
    assert_eq!(out.report.manager_review.as_ref().unwrap().approved, Some(true));
    assert_eq!(out.report.ledger.totals.calls_by_stage[&Stage::Manager], 1);
    let plain = run(&config(), &ds, &mut mock("har_full.jsonl"));
    assert!(plain.report.manager_review.is_none());
}

#[test]
fn images_go_to_the_rewrite_stage_only_by_default() {
    let ds = har();
    let count_images = |all: bool| {
        let cfg = PipelineConfig {
            images_all_stages: all,
            ..config()
        };
        let out = run(&cfg, &ds, &mut mock("har_full.jsonl"));
        out.transcripts
            .iter()
            .map(|t| {
                let n = t.request.as_array().unwrap().iter().flat_map(|m| m["content"].as_array().unwrap().iter()).filter(|p| p["type"] == "image").count();
                (t.stage, n)
            })
            .collect::<Vec<_>>()
    };
    let default = count_images(false);
    assert!(default.iter().all(|(s, n)| (*s == Stage::Rewrite) == (*n == 6)));
    let all = count_images(true);
    assert!(all.iter().all(|(_, n)| *n == 6));
}

#[test]
fn exhausted_backend_still_reports() {
    let ds = har();
    let mut backend = MockBackend::default();
    let out = run(&config(), &ds, &mut backend);
    let r = &out.report;
    assert!(r.error.as_deref().unwrap().contains("NoCandidates"));
    assert!(r.selected.is_none() && r.script.is_none());
    assert!(r.ledger.entries.iter().all(|e| !e.ok));
    assert!(r.ledger.totals.chat_calls <= r.ledger.max_chat_calls);
}
