//! The run report and the run directory layout.
//!
//! ```text
//! <out>/report.json
//! <out>/<dataset>.py
//! <out>/numeric.csv
//! <out>/query.json
//! <out>/images/<nn>_<group>.png
//! <out>/transcripts/<nn>_<stage>.json
//! ```

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::backend::Stage;
use super::ledger::{LedgerEntry, LedgerTotals};
use super::pipeline::{Candidate, PipelineConfig, RoundRecord, SelectionReason};
use crate::archir::space::SearchSpace;
use crate::archir::ArchitectureIR;
use crate::dataset::{Task, TimeSeriesDataset};
use crate::profiler::devices::DeviceSpec;
use crate::profiler::{ConstraintVerdict, Limits, ProfileReport, Quant};
use crate::querygen::QueryImage;

pub const REPORT_FILE: &str = "report.json";
pub const NUMERIC_FILE: &str = "numeric.csv";
pub const QUERY_FILE: &str = "query.json";
pub const IMAGES_DIR: &str = "images";
pub const TRANSCRIPTS_DIR: &str = "transcripts";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn slug(s: &str) -> String {
    let out: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    if out.is_empty() {
        "unnamed".into()
    } else {
        out
    }
}

pub fn script_file_name(dataset_name: &str) -> String {
    format!("{}.py", slug(dataset_name))
}

pub fn image_file_name(index: usize, label: &str) -> String {
    format!("{:02}_{}.png", index + 1, slug(label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub task: Task,
    pub seq_length: usize,
    pub n_features: usize,
    pub output_units: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub class_names: Option<Vec<String>>,
}

impl DatasetSummary {
    pub fn of(ds: &TimeSeriesDataset) -> DatasetSummary {
        DatasetSummary {
            name: ds.name.clone(),
            task: ds.task,
            seq_length: ds.seq_length,
            n_features: ds.n_features,
            output_units: ds.output_units(),
            n_train: ds.train.len(),
            n_test: ds.test.len(),
            class_names: ds.class_names.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub user_prompt: String,
    pub budget: usize,
    pub candidates: usize,
    pub agents: Vec<String>,
    pub no_rewrite: bool,
    pub images_all_stages: bool,
    pub code_agent_writes: bool,
    pub manager_verify: bool,
    pub quant: Quant,
    pub fold_bn: bool,
    pub flash_overhead: u64,
    pub fixed_length: usize,
    pub n_bins: usize,
    pub seed: u64,
    pub model: String,
}

impl ConfigSummary {
    pub fn of(cfg: &PipelineConfig, model: &str) -> ConfigSummary {
        ConfigSummary {
            user_prompt: cfg.user_prompt.clone(),
            budget: cfg.budget,
            candidates: cfg.candidates,
            agents: cfg.agents.names().into_iter().map(String::from).collect(),
            no_rewrite: cfg.no_rewrite,
            images_all_stages: cfg.images_all_stages,
            code_agent_writes: cfg.code_agent_writes,
            manager_verify: cfg.manager_verify,
            quant: cfg.profile.quant,
            fold_bn: cfg.profile.fold_bn,
            flash_overhead: cfg.profile.flash_overhead,
            fixed_length: cfg.fixed_length,
            n_bins: cfg.n_bins,
            seed: cfg.seed,
            model: model.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunFlags {
    pub rewrite_skipped: bool,
    pub rewrite_failed: Option<String>,
    pub design_skipped: bool,
    pub design_fallback: Option<String>,
    pub eval_llm_failed_rounds: Vec<usize>,
    pub best_effort: bool,
    pub code_agent_fallback: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSummary {
    pub id: String,
    pub candidate_index: usize,
    pub reason: SelectionReason,
    pub best_effort: bool,
    pub feasible: bool,
    pub arch: ArchitectureIR,
    pub profile: Option<ProfileReport>,
    pub verdict: Option<ConstraintVerdict>,
    pub predicted_performance: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptSource {
    Emitted,
    CodeAgent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptSummary {
    /// Relative to the run directory.
    pub path: String,
    pub source: ScriptSource,
    pub frozen_hash: Option<String>,
    pub template_hash: String,
    pub frozen_regions_match: bool,
    pub sha256: String,
    /// Whether `get_model()` builds the selected architecture.
    pub matches_selection: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerReview {
    pub approved: Option<bool>,
    pub text: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub model: String,
    pub max_chat_calls: usize,
    pub entries: Vec<LedgerEntry>,
    pub totals: LedgerTotals,
    pub pipeline_wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub dataset: DatasetSummary,
    pub config: ConfigSummary,
    pub device: DeviceSpec,
    pub limits: Option<Limits>,
    pub query: Option<Value>,
    pub search_space: Option<SearchSpace>,
    pub budget: usize,
    pub candidates_per_round: usize,
    pub rounds_used: usize,
    pub rounds: Vec<RoundRecord>,
    pub candidates: Vec<Candidate>,
    pub selected: Option<SelectedSummary>,
    pub script: Option<ScriptSummary>,
    pub flags: RunFlags,
    pub manager_review: Option<ManagerReview>,
    pub ledger: LedgerReport,
    pub error: Option<String>,
}

/// One chat call as written to `transcripts/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: usize,
    pub stage: Stage,
    pub round: Option<usize>,
    pub attempt: usize,
    /// Messages with images reduced to label, size and digest.
    pub request: Value,
    pub response: Option<String>,
    pub error: Option<String>,
    pub parse_error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub script: Option<String>,
    pub images: Vec<QueryImage>,
    pub numeric_csv: Option<String>,
    pub query_json: Option<Value>,
    pub transcripts: Vec<TranscriptEntry>,
}

fn pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// Writes every artifact of a run under `dir`.
pub fn write_run_dir(dir: &Path, outcome: &RunOutcome) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(REPORT_FILE), pretty(&outcome.report))?;
    if let (Some(script), Some(summary)) = (&outcome.script, &outcome.report.script) {
        std::fs::write(dir.join(&summary.path), script)?;
    }
    if let Some(csv) = &outcome.numeric_csv {
        std::fs::write(dir.join(NUMERIC_FILE), csv)?;
    }
    if let Some(q) = &outcome.query_json {
        std::fs::write(dir.join(QUERY_FILE), pretty(q))?;
    }
    if !outcome.images.is_empty() {
        let images = dir.join(IMAGES_DIR);
        std::fs::create_dir_all(&images)?;
        for (i, img) in outcome.images.iter().enumerate() {
            std::fs::write(images.join(image_file_name(i, &img.group_label)), &img.png)?;
        }
    }
    if !outcome.transcripts.is_empty() {
        let tdir = dir.join(TRANSCRIPTS_DIR);
        std::fs::create_dir_all(&tdir)?;
        for t in &outcome.transcripts {
            std::fs::write(tdir.join(format!("{:02}_{}.json", t.seq, t.stage)), pretty(t))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_names_are_sanitized() {
        assert_eq!(script_file_name("UCI HAR"), "UCI_HAR.py");
        assert_eq!(image_file_name(0, "[1,3)"), "01__1_3_.png");
        assert_eq!(script_file_name(""), "unnamed.py");
    }
}
