//! Multimodal query construction and parsing of the rewritten query.

pub mod numeric;
pub mod render;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assets;
use crate::dataset::TimeSeriesDataset;
use crate::jsonfix::{self, JsonFixError};

pub use numeric::{serialize_numeric, DEFAULT_FIXED_LENGTH};
pub use render::{render_all, render_group_image, RenderError, RenderStyle};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataAspect {
    pub name: String,
    pub description: String,
    pub features: String,
    pub context: String,
    pub patterns: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareSpecs {
    pub device_name: String,
    pub ram: String,
    pub flash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelAspect {
    pub name: String,
    pub hardware_specs: HardwareSpecs,
    #[serde(rename = "MAC")]
    pub mac: String,
    pub parameters: String,
    pub latency: String,
    pub performance: String,
}

fn parse_limit_u64(s: &str) -> Option<u64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(v) = s.parse::<u64>() {
        return Some(v);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite() && *v >= 0.0)
        .map(|v| v.floor() as u64)
}

impl ModelAspect {
    pub fn ram_bytes(&self) -> Option<u64> {
        parse_limit_u64(&self.hardware_specs.ram)
    }

    pub fn flash_bytes(&self) -> Option<u64> {
        parse_limit_u64(&self.hardware_specs.flash)
    }

    /// MAC limit, only when the whole field is a number.
    pub fn mac_limit(&self) -> Option<u64> {
        parse_limit_u64(&self.mac)
    }

    pub fn params_limit(&self) -> Option<u64> {
        parse_limit_u64(&self.parameters)
    }

    pub fn latency_ms(&self) -> Option<f64> {
        self.latency
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
    }
}

/// The JSON part of a rewritten query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewrittenQuery {
    pub task_description: String,
    pub data_aspects: DataAspect,
    pub model_aspects: ModelAspect,
}

/// A rendered group image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryImage {
    pub group_label: String,
    pub png: Vec<u8>,
}

impl QueryImage {
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(&self.png))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiObjectiveQuery {
    pub task_description: String,
    pub data: DataAspect,
    pub model: ModelAspect,
    pub numeric_csv: String,
    pub images: Vec<QueryImage>,
    pub raw_user_prompt: String,
}

impl MultiObjectiveQuery {
    /// Query with empty aspects and the raw prompt as task description.
    pub fn passthrough(user_prompt: &str, numeric_csv: String, images: Vec<QueryImage>) -> Self {
        MultiObjectiveQuery {
            task_description: user_prompt.to_string(),
            data: DataAspect::default(),
            model: ModelAspect::default(),
            numeric_csv,
            images,
            raw_user_prompt: user_prompt.to_string(),
        }
    }

    pub fn from_rewrite(
        rewritten: RewrittenQuery,
        user_prompt: &str,
        numeric_csv: String,
        images: Vec<QueryImage>,
    ) -> Self {
        MultiObjectiveQuery {
            task_description: rewritten.task_description,
            data: rewritten.data_aspects,
            model: rewritten.model_aspects,
            numeric_csv,
            images,
            raw_user_prompt: user_prompt.to_string(),
        }
    }

    pub fn rewritten(&self) -> RewrittenQuery {
        RewrittenQuery {
            task_description: self.task_description.clone(),
            data_aspects: self.data.clone(),
            model_aspects: self.model.clone(),
        }
    }

    /// The query as the downstream agents see it, pretty JSON.
    pub fn aspects_json(&self) -> String {
        serde_json::to_string_pretty(&self.rewritten()).expect("query serializes")
    }

    /// JSON view with images reduced to label, size and digest.
    pub fn summary_json(&self) -> Value {
        serde_json::json!({
            "task_description": self.task_description,
            "data_aspects": self.data,
            "model_aspects": self.model,
            "raw_user_prompt": self.raw_user_prompt,
            "numeric_csv_rows": self.numeric_csv.lines().count(),
            "images": self.images.iter().map(|i| serde_json::json!({
                "group_label": i.group_label,
                "bytes": i.png.len(),
                "sha256": i.sha256(),
            })).collect::<Vec<_>>(),
        })
    }
}

const NONE_PROVIDED: &str = "(none provided)";

fn or_none(s: &str) -> &str {
    if s.trim().is_empty() {
        NONE_PROVIDED
    } else {
        s
    }
}

/// The rewrite template with the user prompt substituted and dataset context
/// appended.
pub fn build_rewrite_prompt(
    user_prompt: &str,
    ds: &TimeSeriesDataset,
    numeric_csv: &str,
    image_labels: &[String],
) -> String {
    let mut out = assets::REWRITE_PROMPT.replacen("{user_prompt}", user_prompt, 1);
    if !out.ends_with('\n') {
        out.push('\n');
    }
    let _ = write!(
        out,
        "\n[Dataset]\nname: {}\ntask: {}\nshape: {} time steps x {} features\n",
        or_none(&ds.name),
        ds.task,
        ds.seq_length,
        ds.n_features
    );
    if let Some(classes) = &ds.class_names {
        let _ = writeln!(out, "classes: {}", classes.join(", "));
    }
    let _ = write!(out, "\n[Dataset Description]\n{}\n", or_none(&ds.description));
    out.push_str("\n[Feature Descriptions]\n");
    if ds.feature_descriptions.iter().all(|d| d.trim().is_empty()) {
        let _ = writeln!(out, "{NONE_PROVIDED}");
    } else {
        for (i, d) in ds.feature_descriptions.iter().enumerate() {
            let _ = writeln!(out, "f{i}: {}", or_none(d));
        }
    }
    let _ = write!(
        out,
        "\n[Representative Time Series (timestamp-wise mean per group)]\n{}",
        if numeric_csv.trim().is_empty() { NONE_PROVIDED } else { numeric_csv }
    );
    if !out.ends_with('\n') {
        out.push('\n');
    }
    if !image_labels.is_empty() {
        let _ = write!(
            out,
            "\n[Attached Images]\nOne line chart per group (mean with a shaded band of one standard deviation): {}\n",
            image_labels.join(", ")
        );
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueryParseError {
    #[error("no JSON object found in the rewrite response")]
    NoJsonFound,
    #[error("rewritten query does not match the schema: {}", .0.join("; "))]
    SchemaViolation(Vec<String>),
}

impl From<JsonFixError> for QueryParseError {
    fn from(e: JsonFixError) -> Self {
        match e {
            JsonFixError::NoJsonFound => QueryParseError::NoJsonFound,
            JsonFixError::Malformed(m) => QueryParseError::SchemaViolation(vec![format!("malformed JSON: {m}")]),
        }
    }
}

const TOP_KEYS: &[&str] = &["task_description", "data_aspects", "model_aspects"];
const DATA_KEYS: &[&str] = &["name", "description", "features", "context", "patterns"];
const MODEL_KEYS: &[&str] = &["name", "hardware_specs", "MAC", "parameters", "latency", "performance"];
const HW_KEYS: &[&str] = &["device_name", "ram", "flash"];

fn check_keys(path: &str, obj: &Map<String, Value>, expected: &[&str], problems: &mut Vec<String>) {
    let want: BTreeSet<&str> = expected.iter().copied().collect();
    let have: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
    for k in want.difference(&have) {
        problems.push(format!("missing key \"{path}{k}\""));
    }
    for k in have.difference(&want) {
        problems.push(format!("unexpected key \"{path}{k}\""));
    }
}

fn text_field(path: &str, obj: &Map<String, Value>, key: &str, problems: &mut Vec<String>) -> String {
    match obj.get(key) {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(Value::Bool(b)) => b.to_string(),
        Some(_) => {
            problems.push(format!("\"{path}{key}\" must be a string"));
            String::new()
        }
    }
}

fn object<'a>(
    path: &str,
    parent: &'a Map<String, Value>,
    key: &str,
    problems: &mut Vec<String>,
) -> Option<&'a Map<String, Value>> {
    match parent.get(key) {
        Some(Value::Object(o)) => Some(o),
        Some(_) => {
            problems.push(format!("\"{path}{key}\" must be an object"));
            None
        }
        None => None,
    }
}

/// Parses the model's rewrite response and validates the exact key sets.
pub fn parse_rewritten_query(llm_text: &str) -> Result<RewrittenQuery, QueryParseError> {
    let root = jsonfix::parse_first_object(llm_text)?;
    let root = root.as_object().expect("parse_first_object returns objects");
    let mut problems = Vec::new();
    check_keys("", root, TOP_KEYS, &mut problems);

    let task_description = text_field("", root, "task_description", &mut problems);

    let mut data = DataAspect::default();
    if let Some(d) = object("", root, "data_aspects", &mut problems) {
        check_keys("data_aspects.", d, DATA_KEYS, &mut problems);
        let p = "data_aspects.";
        data = DataAspect {
            name: text_field(p, d, "name", &mut problems),
            description: text_field(p, d, "description", &mut problems),
            features: text_field(p, d, "features", &mut problems),
            context: text_field(p, d, "context", &mut problems),
            patterns: text_field(p, d, "patterns", &mut problems),
        };
    }

    let mut model = ModelAspect::default();
    if let Some(m) = object("", root, "model_aspects", &mut problems) {
        check_keys("model_aspects.", m, MODEL_KEYS, &mut problems);
        let p = "model_aspects.";
        let mut hw = HardwareSpecs::default();
        if let Some(h) = object(p, m, "hardware_specs", &mut problems) {
            let hp = "model_aspects.hardware_specs.";
            check_keys(hp, h, HW_KEYS, &mut problems);
            hw = HardwareSpecs {
                device_name: text_field(hp, h, "device_name", &mut problems),
                ram: text_field(hp, h, "ram", &mut problems),
                flash: text_field(hp, h, "flash", &mut problems),
            };
            for (key, value) in [("ram", &hw.ram), ("flash", &hw.flash)] {
                let v = value.trim();
                if !v.is_empty() && !v.bytes().all(|b| b.is_ascii_digit()) {
                    problems.push(format!("\"{hp}{key}\" must be a byte count, got {v:?}"));
                }
            }
        }
        model = ModelAspect {
            name: text_field(p, m, "name", &mut problems),
            hardware_specs: hw,
            mac: text_field(p, m, "MAC", &mut problems),
            parameters: text_field(p, m, "parameters", &mut problems),
            latency: text_field(p, m, "latency", &mut problems),
            performance: text_field(p, m, "performance", &mut problems),
        };
    }

    if problems.is_empty() {
        Ok(RewrittenQuery {
            task_description,
            data_aspects: data,
            model_aspects: model,
        })
    } else {
        Err(QueryParseError::SchemaViolation(problems))
    }
}
