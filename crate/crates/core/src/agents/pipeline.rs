//! Stage orchestration and final candidate selection.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::backend::{request_tokens, transcript_messages, ChatBackend, ChatMessage, ChatRequest, ContentPart, Role, Stage};
use super::ledger::{Clock, CostLedger, PriceTable};
use super::report::{
    DatasetSummary, ConfigSummary, LedgerReport, ManagerReview, RunFlags, RunOutcome, RunReport, ScriptSource,
    ScriptSummary, SelectedSummary, TranscriptEntry,
};
use super::{AgentRole, AgentSet};
use crate::archir::candidate::parse_candidates;
use crate::archir::space::{default_space, parse_search_space, SearchSpace};
use crate::archir::{validate, ArchitectureIR};
use crate::codegen::{self, SkeletonTemplate};
use crate::dataset::{representative_series, DatasetError, TimeSeriesDataset, DEFAULT_REGRESSION_BINS};
use crate::profiler::devices::{default_device, DeviceSpec};
use crate::profiler::{check_limits, profile, ConstraintVerdict, Limits, ProfileOptions, ProfileReport};
use crate::querygen::numeric::{serialize_numeric, DEFAULT_FIXED_LENGTH};
use crate::querygen::render::{render_all, RenderError, RenderStyle};
use crate::querygen::{build_rewrite_prompt, parse_rewritten_query, MultiObjectiveQuery, QueryImage};

pub const DEFAULT_BUDGET: usize = 3;
pub const DEFAULT_CANDIDATES: usize = 5;
/// Calls per stage before its fallback applies: the first try plus one re-ask.
pub const MAX_ATTEMPTS: usize = 2;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub user_prompt: String,
    pub budget: usize,
    pub candidates: usize,
    pub agents: AgentSet,
    pub no_rewrite: bool,
    pub images_all_stages: bool,
    /// Let the code agent author `get_model()` instead of emitting it.
    pub code_agent_writes: bool,
    /// Ask the manager agent to review the selection.
    pub manager_verify: bool,
    pub profile: ProfileOptions,
    pub device: DeviceSpec,
    pub device_warning: Option<String>,
    /// Limits given explicitly; they override the query and the device.
    pub limit_flags: Limits,
    pub fixed_length: usize,
    pub n_bins: usize,
    pub style: RenderStyle,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            user_prompt: String::new(),
            budget: DEFAULT_BUDGET,
            candidates: DEFAULT_CANDIDATES,
            agents: AgentSet::all(),
            no_rewrite: false,
            images_all_stages: false,
            code_agent_writes: false,
            manager_verify: false,
            profile: ProfileOptions::default(),
            device: default_device(),
            device_warning: None,
            limit_flags: Limits::default(),
            fixed_length: DEFAULT_FIXED_LENGTH,
            n_bins: DEFAULT_REGRESSION_BINS,
            style: RenderStyle::default(),
            seed: 0,
        }
    }
}

/// Upper bound on chat calls for a configuration: rewrite and design with one
/// re-ask each, one search and one eval call per round, and the code stage.
pub fn max_chat_calls(cfg: &PipelineConfig) -> usize {
    if cfg.agents.code_only() {
        return 1;
    }
    let rewrite = if cfg.no_rewrite { 0 } else { MAX_ATTEMPTS };
    let design = if cfg.agents.design { MAX_ATTEMPTS } else { 0 };
    let rounds = if cfg.agents.search {
        cfg.budget * (1 + usize::from(cfg.agents.eval))
    } else {
        0
    };
    let code = if !cfg.agents.search || cfg.code_agent_writes { MAX_ATTEMPTS } else { 0 };
    let manager = usize::from(cfg.manager_verify);
    rewrite + design + rounds + code + manager
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub arch: ArchitectureIR,
    /// Search round that proposed it; 0 for code-agent scripts.
    pub source_round: usize,
    /// Reply text preceding the configuration.
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repairs: Vec<String>,
    pub profile: Option<ProfileReport>,
    pub verdict: Option<ConstraintVerdict>,
    pub predicted_performance: Option<String>,
}

impl Candidate {
    pub fn feasible(&self) -> bool {
        self.verdict.as_ref().is_some_and(|v| v.feasible)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Configurations found in the search reply, valid or not.
    pub proposed: usize,
    pub candidate_ids: Vec<String>,
    pub rejected: Vec<Rejection>,
    pub duplicates: Vec<String>,
    /// 1-based index into `candidate_ids` named by the eval agent.
    pub eval_pick: Option<usize>,
    pub eval_pick_id: Option<String>,
    pub eval_llm_failed: bool,
    pub accepted: bool,
    /// Text sent to the next round.
    pub feedback: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionReason {
    EvalPick,
    Deterministic,
    FirstCandidate,
    CodeAgent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// Index into the candidate history.
    pub index: usize,
    pub id: String,
    pub reason: SelectionReason,
    pub best_effort: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub query: MultiObjectiveQuery,
    pub space: Option<SearchSpace>,
    pub limits: Limits,
    pub rounds_used: usize,
    pub budget: usize,
    pub candidates_per_round: usize,
    pub history: Vec<Candidate>,
    pub rounds: Vec<RoundRecord>,
    pub selected: Option<Selection>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("NoCandidates: no usable candidate after {0} round(s)")]
    NoCandidates(usize),
    #[error("code agent: {0}")]
    CodeAgent(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    fn key(c: &Candidate) -> (usize, f64, u64) {
        match (&c.verdict, &c.profile) {
            (Some(v), Some(p)) => (v.violations.len(), p.latency_ms, p.flash_bytes),
            _ => (usize::MAX, f64::INFINITY, u64::MAX),
        }
    }
    let (ka, kb) = (key(a), key(b));
    ka.0.cmp(&kb.0)
        .then(ka.1.total_cmp(&kb.1))
        .then(ka.2.cmp(&kb.2))
        .then_with(|| a.arch.id.cmp(&b.arch.id))
}

/// The eval agent's pick when feasible, else the least-violating candidate
/// by latency, flash and id.
pub fn select_final(history: &[Candidate], pick: Option<&str>) -> Option<Selection> {
    if let Some(id) = pick {
        if let Some(i) = history.iter().position(|c| c.arch.id == id && c.feasible()) {
            return Some(Selection {
                index: i,
                id: id.to_string(),
                reason: SelectionReason::EvalPick,
                best_effort: false,
            });
        }
    }
    let (index, best) = history.iter().enumerate().min_by(|a, b| rank(a.1, b.1))?;
    Some(Selection {
        index,
        id: best.arch.id.clone(),
        reason: SelectionReason::Deterministic,
        best_effort: !best.feasible(),
    })
}

struct Runner<'a> {
    backend: &'a mut dyn ChatBackend,
    clock: &'a dyn Clock,
    prices: PriceTable,
    ledger: CostLedger,
    transcripts: Vec<TranscriptEntry>,
}

impl Runner<'_> {
    fn call(
        &mut self,
        stage: Stage,
        round: Option<usize>,
        attempt: usize,
        messages: &[ChatMessage],
    ) -> Result<String, String> {
        let req = ChatRequest {
            stage,
            messages: messages.to_vec(),
        };
        let t0 = self.clock.now_ms();
        let res = self.backend.complete(&req);
        let wall = self.clock.now_ms().saturating_sub(t0);
        let (tokens, response, error) = match &res {
            Ok(r) => ((r.tokens_in, r.tokens_out), Some(r.content.clone()), None),
            Err(e) => ((0, 0), None, Some(e.to_string())),
        };
        log::info!("{stage} call (round {round:?}, attempt {attempt}): ~{} tokens in", request_tokens(&req));
        self.ledger.record(&self.prices, stage, round, attempt, tokens, wall, error.clone());
        self.transcripts.push(TranscriptEntry {
            seq: self.ledger.entries.len(),
            stage,
            round,
            attempt,
            request: transcript_messages(&req),
            response,
            error: error.clone(),
            parse_error: None,
        });
        res.map(|r| r.content).map_err(|e| e.to_string())
    }

    fn note_parse_error(&mut self, err: &str) {
        if let Some(t) = self.transcripts.last_mut() {
            t.parse_error = Some(err.to_string());
        }
    }
}

fn system(role: AgentRole) -> ChatMessage {
    ChatMessage::text(Role::System, role.system_message())
}

fn user(text: String, images: &[QueryImage]) -> ChatMessage {
    let mut parts = vec![ContentPart::Text(text)];
    parts.extend(images.iter().map(|i| ContentPart::Png {
        label: i.group_label.clone(),
        bytes: i.png.clone(),
    }));
    ChatMessage { role: Role::User, parts }
}

fn reask(err: &str, what: &str) -> String {
    format!("Your previous reply could not be used: {err}. Reply again with {what}.")
}

fn limits_text(limits: &Limits) -> String {
    let mut out = String::new();
    let mut line = |name: &str, v: Option<String>| {
        if let Some(v) = v {
            let src = limits.sources.get(name).map(String::as_str).unwrap_or("flag");
            let _ = writeln!(out, "- {name}: {v} ({src})");
        }
    };
    line("flash", limits.flash_bytes.map(|v| format!("{v} bytes")));
    line("ram", limits.ram_bytes.map(|v| format!("{v} bytes")));
    line("macs", limits.macs.map(|v| v.to_string()));
    line("params", limits.params.map(|v| v.to_string()));
    line("latency_ms", limits.latency_ms.map(|v| format!("{v} ms")));
    if out.is_empty() {
        out.push_str("- none\n");
    }
    out
}

/// Shared context block for the design, search, eval, code and manager
/// stages.
fn query_context(q: &MultiObjectiveQuery, ds: &TimeSeriesDataset, limits: &Limits) -> String {
    format!(
        "[Task Description]\n{}\n\n[Requirements]\n{}\n\n[Dataset]\nname: {}\ntask: {}\ninput shape: ({}, {})\noutput units: {}\n\n[Resource Limits]\n{}",
        q.task_description.trim(),
        q.aspects_json(),
        ds.name,
        ds.task,
        ds.seq_length,
        ds.n_features,
        ds.output_units(),
        limits_text(limits),
    )
}

fn layers_json(arch: &ArchitectureIR) -> String {
    serde_json::to_string(&serde_json::json!({ "layer_sequence": arch.layers })).expect("layers serialize")
}

/// Prose before each fenced block or bare object that carries a layer list,
/// in order of appearance.
fn rationales(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut prose = String::new();
    let mut block = String::new();
    let mut in_fence = false;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            if in_fence {
                if block.contains("layer_sequence") || block.contains("layers") {
                    out.push(prose.trim().to_string());
                    prose.clear();
                }
                block.clear();
            }
            in_fence = !in_fence;
            continue;
        }
        if in_fence {
            block.push_str(line);
            block.push('\n');
        } else {
            prose.push_str(line);
            prose.push('\n');
        }
    }
    out.into_iter()
        .map(|p| {
            let chars: Vec<char> = p.chars().collect();
            let start = chars.len().saturating_sub(600);
            chars[start..].iter().collect::<String>().trim().to_string()
        })
        .collect()
}

/// 1-based configuration number the eval reply names first, if within `n`.
pub fn parse_pick(text: &str, n: usize) -> Option<usize> {
    let lower = text.to_ascii_lowercase();
    for marker in ["configuration #", "config #", "candidate #", "model #"] {
        let mut rest = lower.as_str();
        while let Some(i) = rest.find(marker) {
            let digits: String = rest[i + marker.len()..].chars().take_while(char::is_ascii_digit).collect();
            if let Ok(k) = digits.parse::<usize>() {
                if (1..=n).contains(&k) {
                    return Some(k);
                }
            }
            rest = &rest[i + marker.len()..];
        }
    }
    None
}

/// The eval reply's performance estimate: the first line that mentions a
/// metric, else its first line.
pub fn predicted_performance(text: &str) -> Option<String> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with("```")).collect();
    let metric = ["accuracy", "rmse", "mae", "f1", "error", "performance"];
    let line = lines
        .iter()
        .find(|l| {
            let lower = l.to_ascii_lowercase();
            metric.iter().any(|m| lower.contains(m)) && l.chars().any(|c| c.is_ascii_digit())
        })
        .or_else(|| lines.first())?;
    Some(line.chars().take(400).collect())
}

/// Fixed template for the next search round.
fn feedback_text(round: &RoundRecord, cands: &[Candidate], limits: &Limits) -> String {
    let mut out = format!("Round {} results from the deterministic profiler.\nLimits:\n{}", round.round, limits_text(limits));
    for (i, c) in cands.iter().enumerate() {
        let status = match &c.verdict {
            Some(v) if v.feasible => "FEASIBLE".to_string(),
            Some(v) => {
                let parts: Vec<String> = v
                    .violations
                    .iter()
                    .map(|x| format!("{} {} > {}", x.metric, x.actual, x.limit))
                    .collect();
                format!("INFEASIBLE ({})", parts.join("; "))
            }
            None => "NOT PROFILED".to_string(),
        };
        let _ = write!(out, "- Model Configuration #{} [{}]: {status}", i + 1, c.arch.short_id());
        if let Some(p) = &c.profile {
            let _ = write!(
                out,
                " | params {}, MACs {}, flash {} B, peak RAM {} B, latency {:.3} ms",
                p.total_params, p.total_macs, p.flash_bytes, p.peak_ram_bytes, p.latency_ms
            );
        }
        out.push('\n');
    }
    for r in &round.rejected {
        let _ = writeln!(out, "- Rejected configuration at position {}: {}", r.position, r.reason);
    }
    if !round.duplicates.is_empty() {
        let _ = writeln!(out, "- {} configuration(s) repeated earlier proposals and were ignored.", round.duplicates.len());
    }
    if let Some(k) = round.eval_pick {
        let ok = cands.get(k - 1).is_some_and(Candidate::feasible);
        let _ = writeln!(out, "Evaluator pick: Model Configuration #{k} ({}).", if ok { "feasible" } else { "infeasible" });
    }
    if let Some(e) = &round.error {
        let _ = writeln!(out, "Problem: {e}");
    }
    out.push_str("Propose new configurations that satisfy every limit and do not repeat the ones above.\n");
    out
}

fn profile_candidate(c: &mut Candidate, cfg: &PipelineConfig, limits: &Limits) {
    match profile(&c.arch, &cfg.device, cfg.profile) {
        Ok(p) => {
            c.verdict = Some(check_limits(&p, limits));
            c.profile = Some(p);
        }
        Err(e) => log::warn!("profiling {} failed: {e}", c.arch.short_id()),
    }
}

struct Partial {
    images: Vec<QueryImage>,
    numeric_csv: Option<String>,
    query: Option<MultiObjectiveQuery>,
    limits: Option<Limits>,
    space: Option<SearchSpace>,
    state: Option<SearchState>,
    script: Option<(String, ScriptSummary)>,
    flags: RunFlags,
    manager: Option<ManagerReview>,
}

/// Runs every enabled stage. Always returns an outcome; failures land in
/// `report.error` with whatever was produced before them.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    ds: &TimeSeriesDataset,
    backend: &mut dyn ChatBackend,
    clock: &dyn Clock,
) -> RunOutcome {
    let started = clock.now_ms();
    let model = backend.model_id().to_string();
    let mut run = Runner {
        backend,
        clock,
        prices: PriceTable::shipped(),
        ledger: CostLedger::new(&model),
        transcripts: Vec::new(),
    };
    let mut p = Partial {
        images: Vec::new(),
        numeric_csv: None,
        query: None,
        limits: None,
        space: None,
        state: None,
        script: None,
        flags: RunFlags::default(),
        manager: None,
    };
    if let Some(w) = &cfg.device_warning {
        p.flags.warnings.push(w.clone());
    }
    let result = drive(cfg, ds, &mut run, &mut p);
    run.ledger.pipeline_wall_ms = clock.now_ms().saturating_sub(started);
    assemble(cfg, ds, run, p, result.err().map(|e| e.to_string()))
}

/// Result of running the rewrite stage on its own.
#[derive(Debug, Clone)]
pub struct RewriteOutcome {
    pub query: MultiObjectiveQuery,
    /// Set when both attempts failed and the query is a passthrough.
    pub failure: Option<String>,
    pub ledger: CostLedger,
    pub transcripts: Vec<TranscriptEntry>,
}

/// Builds the multi-objective query only: rendering, numeric summary and the
/// rewrite call (skipped with `no_rewrite`).
pub fn run_rewrite_stage(
    cfg: &PipelineConfig,
    ds: &TimeSeriesDataset,
    backend: &mut dyn ChatBackend,
    clock: &dyn Clock,
) -> Result<RewriteOutcome, PipelineError> {
    let started = clock.now_ms();
    let model = backend.model_id().to_string();
    let mut run = Runner {
        backend,
        clock,
        prices: PriceTable::shipped(),
        ledger: CostLedger::new(&model),
        transcripts: Vec::new(),
    };
    let reps = representative_series(ds, cfg.n_bins)?;
    let numeric_csv = serialize_numeric(&reps, cfg.fixed_length);
    let images: Vec<QueryImage> = render_all(&reps, cfg.style)?
        .into_iter()
        .map(|(group_label, png)| QueryImage { group_label, png })
        .collect();
    let mut p = Partial {
        images,
        numeric_csv: None,
        query: None,
        limits: None,
        space: None,
        state: None,
        script: None,
        flags: RunFlags::default(),
        manager: None,
    };
    let query = if cfg.no_rewrite {
        MultiObjectiveQuery::passthrough(&cfg.user_prompt, numeric_csv, p.images.clone())
    } else {
        rewrite_stage(cfg, ds, &mut run, &mut p, &numeric_csv)
    };
    run.ledger.pipeline_wall_ms = clock.now_ms().saturating_sub(started);
    Ok(RewriteOutcome {
        query,
        failure: p.flags.rewrite_failed,
        ledger: run.ledger,
        transcripts: run.transcripts,
    })
}

fn drive(cfg: &PipelineConfig, ds: &TimeSeriesDataset, run: &mut Runner, p: &mut Partial) -> Result<(), PipelineError> {
    if cfg.budget == 0 || cfg.candidates == 0 {
        return Err(PipelineError::Config("budget and candidates must be at least 1".into()));
    }
    let reps = representative_series(ds, cfg.n_bins)?;
    let numeric_csv = serialize_numeric(&reps, cfg.fixed_length);
    p.images = render_all(&reps, cfg.style)?
        .into_iter()
        .map(|(group_label, png)| QueryImage { group_label, png })
        .collect();
    p.numeric_csv = Some(numeric_csv.clone());
    let template = SkeletonTemplate::for_task(ds.task);

    if cfg.agents.code_only() {
        p.flags.rewrite_skipped = true;
        p.flags.design_skipped = true;
        let query = MultiObjectiveQuery::passthrough(&cfg.user_prompt, numeric_csv, p.images.clone());
        let limits = Limits::resolve(&cfg.limit_flags, None, &cfg.device);
        p.query = Some(query.clone());
        p.limits = Some(limits.clone());
        let prompt = codegen::build_zero_shot_prompt(ds.task, &ds.name, &cfg.user_prompt, &template);
        let stage_images = if cfg.images_all_stages { p.images.as_slice() } else { &[] };
        let messages = vec![system(AgentRole::Code), user(prompt, stage_images)];
        let text = run.call(Stage::Code, None, 1, &messages).map_err(PipelineError::CodeAgent)?;
        let script = codegen::extract_script(&text, &template).map_err(|e| {
            run.note_parse_error(&e.to_string());
            PipelineError::CodeAgent(e.to_string())
        })?;
        let mut state = new_state(cfg, query, None, limits);
        finish_code_script(cfg, ds, &template, script, &text, &mut state, p);
        p.state = Some(state);
        return Ok(());
    }

    let query = if cfg.no_rewrite {
        p.flags.rewrite_skipped = true;
        MultiObjectiveQuery::passthrough(&cfg.user_prompt, numeric_csv.clone(), p.images.clone())
    } else {
        rewrite_stage(cfg, ds, run, p, &numeric_csv)
    };
    let limits = Limits::resolve(&cfg.limit_flags, Some(&query.model), &cfg.device);
    p.query = Some(query.clone());
    p.limits = Some(limits.clone());
    let stage_images: Vec<QueryImage> = if cfg.images_all_stages { p.images.clone() } else { Vec::new() };
    let ctx = query_context(&query, ds, &limits);

    let space = if cfg.agents.design {
        Some(design_stage(run, p, &ctx, &stage_images))
    } else {
        p.flags.design_skipped = true;
        None
    };
    p.space = space.clone();
    let mut state = new_state(cfg, query, space, limits);

    if !cfg.agents.search {
        let res = code_from_space(cfg, ds, run, &template, &ctx, &stage_images, &mut state, p);
        p.state = Some(state);
        return res;
    }

    let mut feedback: Option<String> = None;
    while state.rounds_used < state.budget {
        let start = state.history.len();
        let mut rec = search_round(ds, run, &ctx, &stage_images, &mut state, feedback.as_deref());
        let end = state.history.len();
        let limits = state.limits.clone();
        state.history[start..end]
            .par_iter_mut()
            .for_each(|c| profile_candidate(c, cfg, &limits));
        if cfg.agents.eval && end > start {
            eval_call(run, &ctx, &stage_images, &mut state.history[start..end], &mut rec);
            if rec.eval_llm_failed {
                p.flags.eval_llm_failed_rounds.push(rec.round);
            }
        }
        let cands = &state.history[start..end];
        rec.accepted = match rec.eval_pick {
            _ if !cfg.agents.eval => true,
            Some(k) => cands[k - 1].feasible(),
            None => cands.iter().any(Candidate::feasible),
        };
        let done = rec.accepted || !cfg.agents.eval;
        if !done && state.rounds_used < state.budget {
            let fb = feedback_text(&rec, cands, &state.limits);
            rec.feedback = Some(fb.clone());
            feedback = Some(fb);
        }
        state.rounds.push(rec);
        if done {
            break;
        }
    }

    let selection = if cfg.agents.eval {
        let pick = state.rounds.iter().rev().find_map(|r| r.eval_pick_id.clone());
        select_final(&state.history, pick.as_deref())
    } else {
        state.history.first().map(|c| Selection {
            index: 0,
            id: c.arch.id.clone(),
            reason: SelectionReason::FirstCandidate,
            best_effort: !c.feasible(),
        })
    };
    let Some(selection) = selection else {
        let n = state.rounds_used;
        p.state = Some(state);
        return Err(PipelineError::NoCandidates(n));
    };
    p.flags.best_effort = selection.best_effort;
    let arch = state.history[selection.index].arch.clone();
    state.selected = Some(selection);

    code_stage(cfg, ds, run, &template, &ctx, &stage_images, &arch, p);
    if cfg.manager_verify {
        manager_stage(run, &ctx, &state, p);
    }
    p.state = Some(state);
    Ok(())
}

fn new_state(cfg: &PipelineConfig, query: MultiObjectiveQuery, space: Option<SearchSpace>, limits: Limits) -> SearchState {
    SearchState {
        query,
        space,
        limits,
        rounds_used: 0,
        budget: cfg.budget,
        candidates_per_round: cfg.candidates,
        history: Vec::new(),
        rounds: Vec::new(),
        selected: None,
    }
}

fn rewrite_stage(
    cfg: &PipelineConfig,
    ds: &TimeSeriesDataset,
    run: &mut Runner,
    p: &mut Partial,
    numeric_csv: &str,
) -> MultiObjectiveQuery {
    let labels: Vec<String> = p.images.iter().map(|i| i.group_label.clone()).collect();
    let prompt = build_rewrite_prompt(&cfg.user_prompt, ds, numeric_csv, &labels);
    let mut messages = vec![system(AgentRole::Manager), user(prompt, &p.images)];
    let mut last_err = String::new();
    for attempt in 1..=MAX_ATTEMPTS {
        match run.call(Stage::Rewrite, None, attempt, &messages) {
            Ok(text) => match parse_rewritten_query(&text) {
                Ok(rq) => {
                    return MultiObjectiveQuery::from_rewrite(rq, &cfg.user_prompt, numeric_csv.to_string(), p.images.clone())
                }
                Err(e) => {
                    last_err = e.to_string();
                    run.note_parse_error(&last_err);
                    messages.push(ChatMessage::text(Role::Assistant, text));
                    messages.push(ChatMessage::text(Role::User, reask(&last_err, "only the JSON object in the requested format")));
                }
            },
            Err(e) => last_err = e,
        }
    }
    p.flags.rewrite_failed = Some(format!("RewriteFailed after {MAX_ATTEMPTS} attempts: {last_err}"));
    MultiObjectiveQuery::passthrough(&cfg.user_prompt, numeric_csv.to_string(), p.images.clone())
}

fn design_stage(run: &mut Runner, p: &mut Partial, ctx: &str, images: &[QueryImage]) -> SearchSpace {
    let prompt = format!(
        "{ctx}\n[Instructions]\nDesign a neural network search space for this task and device. Reply with one JSON object inside a ```python block. Each key is a search dimension (for example layer_type, Conv1D_kernel_size, Conv1D_filters, LSTM_units, Dense_units, activation, dropout_rate, pooling_type, pool_size, strides, batch_normalization) and each value is the list of allowed values.\n"
    );
    let mut messages = vec![system(AgentRole::Design), user(prompt, images)];
    let mut last_err = String::new();
    for attempt in 1..=MAX_ATTEMPTS {
        match run.call(Stage::Design, None, attempt, &messages) {
            Ok(text) => match parse_search_space(&text) {
                Ok(space) => {
                    p.flags.warnings.extend(space.warnings.iter().map(|w| format!("search space: {w}")));
                    return space;
                }
                Err(e) => {
                    last_err = e.to_string();
                    run.note_parse_error(&last_err);
                    messages.push(ChatMessage::text(Role::Assistant, text));
                    messages.push(ChatMessage::text(Role::User, reask(&last_err, "one JSON object describing the search space")));
                }
            },
            Err(e) => last_err = e,
        }
    }
    p.flags.design_fallback = Some(format!("DesignFailed after {MAX_ATTEMPTS} attempts: {last_err}; default space used"));
    default_space()
}

fn search_round(
    ds: &TimeSeriesDataset,
    run: &mut Runner,
    ctx: &str,
    images: &[QueryImage],
    state: &mut SearchState,
    feedback: Option<&str>,
) -> RoundRecord {
    let round = state.rounds_used + 1;
    state.rounds_used = round;
    let mut rec = RoundRecord {
        round,
        ..RoundRecord::default()
    };
    let mut prompt = ctx.to_string();
    if let Some(space) = &state.space {
        let _ = write!(prompt, "\n[Search Space]\n```json\n{}\n```\n", space.to_prompt_json());
    }
    let _ = write!(
        prompt,
        "\n[Instructions]\nPropose {} distinct model configurations{} for input shape ({}, {}). Head each one with \"Model Configuration #k\" and give it as a Python dict with a \"layer_sequence\" list inside its own ```python block. Each layer is a dict with \"layer_type\" and its hyperparameters. The last layer must be Dense with {} units.\n",
        state.candidates_per_round,
        if state.space.is_some() { " within the search space" } else { "" },
        ds.seq_length,
        ds.n_features,
        ds.output_units(),
    );
    if let Some(fb) = feedback {
        let _ = write!(prompt, "\n[Feedback From Previous Round]\n{fb}");
    }
    let messages = vec![system(AgentRole::Search), user(prompt, images)];
    let text = match run.call(Stage::Search, Some(round), 1, &messages) {
        Ok(t) => t,
        Err(e) => {
            rec.error = Some(format!("EmptyRound: {e}"));
            return rec;
        }
    };
    let parsed = parse_candidates(&text);
    let notes = rationales(&text);
    rec.proposed = parsed.configs.len() + parsed.rejected.len();
    rec.rejected = parsed
        .rejected
        .iter()
        .map(|r| Rejection {
            position: r.position,
            reason: r.reason.clone(),
        })
        .collect();
    let rejected_at: BTreeSet<usize> = parsed.rejected.iter().map(|r| r.position).collect();
    let positions = (1..=rec.proposed).filter(|p| !rejected_at.contains(p));
    let mut seen: BTreeSet<String> = state.history.iter().map(|c| c.arch.id.clone()).collect();
    let mut added = 0;
    for (config, position) in parsed.configs.into_iter().zip(positions) {
        let arch = ArchitectureIR::new(config.layers, (ds.seq_length, ds.n_features), ds.output_units(), ds.task);
        if let Err(violations) = validate(&arch) {
            let reason = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
            rec.rejected.push(Rejection { position, reason });
            continue;
        }
        if !seen.insert(arch.id.clone()) {
            rec.duplicates.push(arch.id.clone());
            continue;
        }
        if added == state.candidates_per_round {
            rec.rejected.push(Rejection {
                position,
                reason: format!("beyond the {} configurations requested", state.candidates_per_round),
            });
            continue;
        }
        added += 1;
        rec.candidate_ids.push(arch.id.clone());
        state.history.push(Candidate {
            arch,
            source_round: round,
            rationale: notes.get(position - 1).cloned().unwrap_or_default(),
            repairs: config.repairs,
            profile: None,
            verdict: None,
            predicted_performance: None,
        });
    }
    rec.rejected.sort_by_key(|r| r.position);
    if added == 0 {
        run.note_parse_error("no usable configuration");
        rec.error = Some(format!("EmptyRound: none of {} proposed configuration(s) was usable", rec.proposed));
    }
    rec
}

fn eval_call(run: &mut Runner, ctx: &str, images: &[QueryImage], cands: &mut [Candidate], rec: &mut RoundRecord) {
    let mut prompt = format!("{ctx}\n[Candidate Models]\n");
    for (i, c) in cands.iter().enumerate() {
        let _ = write!(prompt, "Model Configuration #{} (id {})\n```json\n{}\n```\n", i + 1, c.arch.short_id(), layers_json(&c.arch));
        if let Some(p) = &c.profile {
            let _ = writeln!(
                prompt,
                "Profile: params {}, MACs {}, flash {} bytes, peak RAM {} bytes, latency {:.3} ms, energy {:.3e} J ({})",
                p.total_params, p.total_macs, p.flash_bytes, p.peak_ram_bytes, p.latency_ms, p.energy_j, p.quant
            );
        }
        let verdict = match &c.verdict {
            Some(v) if v.feasible => "feasible".to_string(),
            Some(v) => format!(
                "infeasible ({})",
                v.violations
                    .iter()
                    .map(|x| format!("{} {} > {}", x.metric, x.actual, x.limit))
                    .collect::<Vec<_>>()
                    .join("; ")
            ),
            None => "not profiled".to_string(),
        };
        let _ = writeln!(prompt, "Verdict: {verdict}\n");
    }
    prompt.push_str("[Instructions]\nThe profiles and verdicts above are measured and final. Estimate the expected performance of each configuration, then name the single best one as \"Model Configuration #k\" and give its predicted performance.\n");
    let messages = vec![system(AgentRole::Eval), user(prompt, images)];
    match run.call(Stage::Eval, Some(rec.round), 1, &messages) {
        Ok(text) => {
            rec.eval_pick = parse_pick(&text, cands.len());
            match rec.eval_pick {
                Some(k) => {
                    rec.eval_pick_id = Some(cands[k - 1].arch.id.clone());
                    cands[k - 1].predicted_performance = predicted_performance(&text);
                }
                None => run.note_parse_error("no \"Model Configuration #k\" pick found"),
            }
        }
        Err(e) => {
            rec.eval_llm_failed = true;
            rec.error = Some(format!("EvalLLMFailed: {e}"));
        }
    }
}

fn script_names(ds: &TimeSeriesDataset) -> BTreeMap<String, i64> {
    let mut names = BTreeMap::new();
    names.insert("seq_length".to_string(), ds.seq_length as i64);
    names.insert("n_features".to_string(), ds.n_features as i64);
    names.insert("n_classes".to_string(), ds.output_units() as i64);
    names
}

/// Architecture described by a script's `get_model()`.
fn arch_from_script(script: &str, ds: &TimeSeriesDataset) -> Result<ArchitectureIR, String> {
    let layers = codegen::parse_layers(script, &script_names(ds)).map_err(|e| e.to_string())?;
    let arch = ArchitectureIR::new(layers, (ds.seq_length, ds.n_features), ds.output_units(), ds.task);
    validate(&arch).map_err(|v| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))?;
    Ok(arch)
}

fn script_summary(script: &str, template: &SkeletonTemplate, ds: &TimeSeriesDataset, source: ScriptSource) -> ScriptSummary {
    let frozen = codegen::frozen_hash(script).ok();
    ScriptSummary {
        path: super::report::script_file_name(&ds.name),
        source,
        frozen_regions_match: frozen.as_deref() == Some(template.immutable_hash.as_str()),
        frozen_hash: frozen,
        template_hash: template.immutable_hash.clone(),
        sha256: super::report::sha256_hex(script.as_bytes()),
        matches_selection: None,
    }
}

/// Records a code-agent script as the run's only candidate and output.
fn finish_code_script(
    cfg: &PipelineConfig,
    ds: &TimeSeriesDataset,
    template: &SkeletonTemplate,
    script: String,
    reply: &str,
    state: &mut SearchState,
    p: &mut Partial,
) {
    let summary = script_summary(&script, template, ds, ScriptSource::CodeAgent);
    match arch_from_script(&script, ds) {
        Ok(arch) => {
            let mut c = Candidate {
                arch,
                source_round: 0,
                rationale: reply.split("```").next().unwrap_or("").trim().to_string(),
                repairs: Vec::new(),
                profile: None,
                verdict: None,
                predicted_performance: None,
            };
            profile_candidate(&mut c, cfg, &state.limits);
            let best_effort = !c.feasible();
            p.flags.best_effort = best_effort;
            state.selected = Some(Selection {
                index: 0,
                id: c.arch.id.clone(),
                reason: SelectionReason::CodeAgent,
                best_effort,
            });
            state.history.push(c);
        }
        Err(e) => p.flags.warnings.push(format!("could not recover the architecture from the script: {e}")),
    }
    p.script = Some((script, summary));
}

#[allow(clippy::too_many_arguments)]
fn code_from_space(
    cfg: &PipelineConfig,
    ds: &TimeSeriesDataset,
    run: &mut Runner,
    template: &SkeletonTemplate,
    ctx: &str,
    images: &[QueryImage],
    state: &mut SearchState,
    p: &mut Partial,
) -> Result<(), PipelineError> {
    let mut desc = ctx.to_string();
    if let Some(space) = &state.space {
        let _ = write!(desc, "\n[Search Space]\n```json\n{}\n```\n", space.to_prompt_json());
    }
    desc.push_str("Build one model that satisfies every resource limit.");
    let prompt = codegen::build_zero_shot_prompt(ds.task, &ds.name, &desc, template);
    let mut messages = vec![system(AgentRole::Code), user(prompt, images)];
    let mut last_err = String::new();
    for attempt in 1..=MAX_ATTEMPTS {
        match run.call(Stage::Code, None, attempt, &messages) {
            Ok(text) => match codegen::extract_script(&text, template) {
                Ok(script) => {
                    finish_code_script(cfg, ds, template, script, &text, state, p);
                    return Ok(());
                }
                Err(e) => {
                    last_err = e.to_string();
                    run.note_parse_error(&last_err);
                    messages.push(ChatMessage::text(Role::Assistant, text));
                    messages.push(ChatMessage::text(Role::User, reask(&last_err, "the complete script in one ```python block")));
                }
            },
            Err(e) => last_err = e,
        }
    }
    Err(PipelineError::CodeAgent(last_err))
}

#[allow(clippy::too_many_arguments)]
fn code_stage(
    cfg: &PipelineConfig,
    ds: &TimeSeriesDataset,
    run: &mut Runner,
    template: &SkeletonTemplate,
    ctx: &str,
    images: &[QueryImage],
    arch: &ArchitectureIR,
    p: &mut Partial,
) {
    if cfg.code_agent_writes && cfg.agents.code {
        let desc = format!(
            "{ctx}\n[Selected Model Configuration]\n```json\n{}\n```\nImplement exactly this configuration in get_model().",
            layers_json(arch)
        );
        let prompt = codegen::build_zero_shot_prompt(ds.task, &ds.name, &desc, template);
        let mut messages = vec![system(AgentRole::Code), user(prompt, images)];
        let mut last_err = String::new();
        for attempt in 1..=MAX_ATTEMPTS {
            match run.call(Stage::Code, None, attempt, &messages) {
                Ok(text) => match codegen::extract_script(&text, template) {
                    Ok(script) => {
                        let mut summary = script_summary(&script, template, ds, ScriptSource::CodeAgent);
                        summary.matches_selection = Some(arch_from_script(&script, ds).is_ok_and(|a| a.id == arch.id));
                        p.script = Some((script, summary));
                        return;
                    }
                    Err(e) => {
                        last_err = e.to_string();
                        run.note_parse_error(&last_err);
                        messages.push(ChatMessage::text(Role::Assistant, text));
                        messages.push(ChatMessage::text(Role::User, reask(&last_err, "the complete script in one ```python block")));
                    }
                },
                Err(e) => last_err = e,
            }
        }
        p.flags.code_agent_fallback = Some(format!("code agent failed after {MAX_ATTEMPTS} attempts: {last_err}; script emitted from the selection"));
    }
    let script = codegen::emit_script(arch, template);
    let mut summary = script_summary(&script, template, ds, ScriptSource::Emitted);
    summary.matches_selection = Some(true);
    p.script = Some((script, summary));
}

fn manager_stage(run: &mut Runner, ctx: &str, state: &SearchState, p: &mut Partial) {
    let Some(sel) = &state.selected else { return };
    let c = &state.history[sel.index];
    let mut prompt = format!("{ctx}\n[Suggested Model]\n```json\n{}\n```\n", layers_json(&c.arch));
    if let (Some(pr), Some(v)) = (&c.profile, &c.verdict) {
        let _ = writeln!(
            prompt,
            "Profile: params {}, MACs {}, flash {} bytes, peak RAM {} bytes, latency {:.3} ms. Feasible: {}.",
            pr.total_params, pr.total_macs, pr.flash_bytes, pr.peak_ram_bytes, pr.latency_ms, v.feasible
        );
    }
    prompt.push_str("[Instructions]\nVerify whether the suggested model meets the user requirements and constraints. Begin the reply with APPROVED or REJECTED, then give reasons.\n");
    let messages = vec![system(AgentRole::Manager), user(prompt, &[])];
    let review = match run.call(Stage::Manager, None, 1, &messages) {
        Ok(text) => {
            let head = text.trim_start().to_ascii_uppercase();
            let approved = if head.starts_with("APPROVED") {
                Some(true)
            } else if head.starts_with("REJECTED") {
                Some(false)
            } else {
                None
            };
            ManagerReview { approved, text: Some(text), error: None }
        }
        Err(e) => ManagerReview {
            approved: None,
            text: None,
            error: Some(e),
        },
    };
    p.manager = Some(review);
}

fn assemble(cfg: &PipelineConfig, ds: &TimeSeriesDataset, run: Runner, p: Partial, error: Option<String>) -> RunOutcome {
    let totals = run.ledger.totals();
    let state = p.state;
    let selected = state.as_ref().and_then(|s| {
        let sel = s.selected.as_ref()?;
        let c = &s.history[sel.index];
        Some(SelectedSummary {
            id: sel.id.clone(),
            candidate_index: sel.index,
            reason: sel.reason,
            best_effort: sel.best_effort,
            feasible: c.feasible(),
            arch: c.arch.clone(),
            profile: c.profile.clone(),
            verdict: c.verdict.clone(),
            predicted_performance: c.predicted_performance.clone(),
        })
    });
    let query_json = p.query.as_ref().map(MultiObjectiveQuery::summary_json);
    let report = RunReport {
        schema_version: 1,
        dataset: DatasetSummary::of(ds),
        config: ConfigSummary::of(cfg, &run.ledger.model),
        device: cfg.device.clone(),
        limits: p.limits,
        query: query_json.clone(),
        search_space: p.space,
        budget: cfg.budget,
        candidates_per_round: cfg.candidates,
        rounds_used: state.as_ref().map_or(0, |s| s.rounds_used),
        rounds: state.as_ref().map(|s| s.rounds.clone()).unwrap_or_default(),
        candidates: state.as_ref().map(|s| s.history.clone()).unwrap_or_default(),
        selected,
        script: p.script.as_ref().map(|(_, s)| s.clone()),
        flags: p.flags,
        manager_review: p.manager,
        ledger: LedgerReport {
            model: run.ledger.model.clone(),
            max_chat_calls: max_chat_calls(cfg),
            entries: run.ledger.entries.clone(),
            totals,
            pipeline_wall_ms: run.ledger.pipeline_wall_ms,
        },
        error,
    };
    RunOutcome {
        report,
        script: p.script.map(|(s, _)| s),
        images: p.images,
        numeric_csv: p.numeric_csv,
        query_json,
        transcripts: run.transcripts,
    }
}
