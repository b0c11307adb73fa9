use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const HAR_PROMPT: &str = "Build a human activity classifier for a wearable with 1 MB RAM, 2 MB flash and at most 500 ms latency.";

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn fixture(rel: &str) -> String {
    root().join("fixtures").join(rel).display().to_string()
}

fn naq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_naq"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("naq runs")
}

fn har_query(out: &Path, extra: &[&str]) -> Output {
    let data = fixture("datasets");
    let mock = fixture("mock/har_full.jsonl");
    let mut args = vec![
        "query",
        "--data",
        &data,
        "--name",
        "har_tiny",
        "--prompt",
        HAR_PROMPT,
        "--mock-fixture",
        &mock,
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    naq(&args)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn schema(name: &str) -> Value {
    read_json(&root().join("docs").join(name))
}

fn validate(schema_value: &Value, instance: &Value) -> Vec<String> {
    let compiled = jsonschema::JSONSchema::options()
        .with_draft(jsonschema::Draft::Draft7)
        .with_document("json-schema:///architecture_ir.schema.json".into(), schema("architecture_ir.schema.json"))
        .compile(schema_value)
        .expect("schema compiles");
    let errors = match compiled.validate(instance) {
        Ok(()) => Vec::new(),
        Err(errs) => errs.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    errors
}

#[test]
fn mock_query_writes_a_valid_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = har_query(&out, &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let report = read_json(&out.join("report.json"));
    let errors = validate(&schema("report.schema.json"), &report);
    assert!(errors.is_empty(), "{errors:#?}");
    assert!(report["error"].is_null());

    let script = report["script"]["path"].as_str().unwrap();
    let bytes = std::fs::read(out.join(script)).unwrap();
    assert_eq!(report["script"]["sha256"], hex(&Sha256::digest(&bytes)));
    assert_eq!(report["script"]["frozen_regions_match"], true);
    assert!(out.join("numeric.csv").is_file());
    assert!(out.join("query.json").is_file());
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 6);
    let transcripts = std::fs::read_dir(out.join("transcripts")).unwrap().count() as u64;
    assert_eq!(report["ledger"]["totals"]["chat_calls"].as_u64().unwrap(), transcripts);
}

#[test]
fn every_candidate_arch_matches_the_ir_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(har_query(&out, &[]).status.success());
    let report = read_json(&out.join("report.json"));
    let arch_schema = schema("architecture_ir.schema.json");
    for c in report["candidates"].as_array().unwrap() {
        let errors = validate(&arch_schema, &c["arch"]);
        assert!(errors.is_empty(), "{errors:#?}");
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn missing_dataset_exits_nonzero_with_a_clear_message() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture("datasets");
    let res = naq(&[
        "query",
        "--data",
        &data,
        "--name",
        "no_such_set",
        "--prompt",
        "x",
        "--mock-fixture",
        &fixture("mock/har_full.jsonl"),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("missing file"), "{err}");
    assert!(err.contains("no_such_set"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn code_only_run_makes_one_call() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let data = fixture("datasets");
    let mock = fixture("mock/har_code_only.jsonl");
    let res = naq(&[
        "query",
        "--data",
        &data,
        "--name",
        "har_tiny",
        "--prompt",
        HAR_PROMPT,
        "--mock-fixture",
        &mock,
        "--agents",
        "code",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["ledger"]["totals"]["chat_calls"], 1);
    assert_eq!(report["ledger"]["totals"]["calls_by_stage"]["code"], 1);
    assert_eq!(report["ledger"]["max_chat_calls"], 1);
    assert!(report["selected"].is_object());
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "data = {:?}\nname = \"har_tiny\"\nprompt = {:?}\nmock_fixture = {:?}\nbudget = 1\nflash = 4096\n",
            fixture("datasets"),
            HAR_PROMPT,
            fixture("mock/har_full.jsonl"),
        ),
    )
    .unwrap();
    let out = dir.path().join("run");
    let res = naq(&["query", "--config", cfg.to_str().unwrap(), "--flash", "2097152", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["budget"], 1);
    assert_eq!(report["limits"]["flash_bytes"], 2097152);
    assert_eq!(report["limits"]["sources"]["flash"], "flag");
}

#[test]
fn render_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture("datasets");
    let mut snapshots = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let res = naq(&["render", "--data", &data, "--name", "bidmc_tiny", "--out", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(out.join("images"))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files.push(("numeric.csv".into(), std::fs::read(out.join("numeric.csv")).unwrap()));
        snapshots.push(files);
    }
    assert!(snapshots[0].len() > 1);
    assert_eq!(snapshots[0], snapshots[1]);
}

#[test]
fn profile_reads_layer_sequence_text() {
    let res = naq(&[
        "profile",
        "--arch",
        &fixture("transcripts/bidmc_search.txt"),
        "--input-shape",
        "400,2",
        "--output-units",
        "1",
        "--task",
        "regression",
        "--ram",
        "32768",
        "--flash",
        "65536",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let doc: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(doc["verdict"]["feasible"], true);
    assert_eq!(doc["limits"]["sources"]["flash"], "flag");
    assert!(doc["profile"]["flash_bytes"].as_u64().unwrap() < 65536);
}

#[test]
fn profile_reads_ir_json_and_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(har_query(&out, &[]).status.success());
    let report = read_json(&out.join("report.json"));
    let heavy = report["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["verdict"]["feasible"] == false)
        .expect("fixture has an infeasible candidate");
    let arch_path = dir.path().join("arch.json");
    std::fs::write(&arch_path, serde_json::to_string(&heavy["arch"]).unwrap()).unwrap();
    let res = naq(&["profile", "--arch", arch_path.to_str().unwrap(), "--flash", "2097152"]);
    assert!(res.status.success());
    let doc: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(doc["arch_id"], heavy["arch"]["id"]);
    assert_eq!(doc["profile"], heavy["profile"]);
    assert_eq!(doc["verdict"]["violations"][0]["metric"], "flash");
}

#[test]
fn rewrite_command_prints_the_query() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture("datasets");
    let mock = fixture("mock/rewrite_retry.jsonl");
    let res = naq(&[
        "rewrite",
        "--data",
        &data,
        "--name",
        "har_tiny",
        "--prompt",
        HAR_PROMPT,
        "--mock-fixture",
        &mock,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let doc: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(doc["ledger"]["totals"]["chat_calls"], 2);
    assert!(doc["query"]["model_aspects"].is_object());
    assert_eq!(std::fs::read_dir(dir.path().join("transcripts")).unwrap().count(), 2);
}

#[test]
fn unknown_agent_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = har_query(&dir.path().join("run"), &["--agents", "planner"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown agent"));
}
